"""Binary container for trained models.

Layout (little-endian): magic, version, the network description text, then
one record per parameterised layer.  Trinary weights are packed 2 bits each;
hidden weights and momentum are float32 (enough to resume training);
normalisation statistics, biases and the full-precision transduction weights
are float64 so deployment is reproduced exactly.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .netspec import format_network, parse_network
from .trainer import BatchNormStats, LayerParams, TrainedModel, layer_forward

MAGIC = b"NSMD"
VERSION = 1

_LAYER_HDR = struct.calcsize("<HB4I")


class ModelFileError(ValueError):
    pass


def pack_trinary(w: np.ndarray) -> bytes:
    flat = np.asarray(w).reshape(-1).astype(np.int64)
    codes = np.where(flat == 1, 1, np.where(flat == -1, 2, 0)).astype(np.uint8)
    pad = (-len(codes)) % 4
    codes = np.concatenate([codes, np.zeros(pad, np.uint8)]).reshape(-1, 4)
    packed = codes[:, 0] | (codes[:, 1] << 2) | (codes[:, 2] << 4) | (codes[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_trinary(raw: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(raw, np.uint8)
    codes = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:count]
    if np.any(codes == 3):
        raise ModelFileError("invalid trinary code")
    return np.where(codes == 1, 1, np.where(codes == 2, -1, 0)).astype(np.int8)


def _write_array(f, arr, dtype):
    f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read(f, n):
    data = f.read(n)
    if len(data) != n:
        raise ModelFileError("truncated model file")
    return data


def _read_array(f, shape, dtype):
    dt = np.dtype(dtype)
    count = int(np.prod(shape))
    return np.frombuffer(_read(f, count * dt.itemsize), dt).reshape(shape).astype(
        np.float64 if dt.kind == "f" else dt)


def write_model(model: TrainedModel, f, layers=None) -> None:
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        with open(f, "wb") as fh:
            return write_model(model, fh, layers)
    text = format_network(model.net).encode()
    keys = sorted(model.params) if layers is None else sorted(layers)
    f.write(struct.pack("<4sHI", MAGIC, VERSION, len(text)))
    f.write(text)
    f.write(struct.pack("<I", len(keys)))
    for k in keys:
        p = model.params[k]
        shape = p.hidden_weights.shape
        real = p.trinary_weights is None
        f.write(struct.pack("<HB4I", k, int(real), *shape))
        if real:
            _write_array(f, p.hidden_weights, "<f8")
        else:
            f.write(pack_trinary(p.trinary_weights))
            _write_array(f, p.hidden_weights, "<f4")
        _write_array(f, p.momentum, "<f4")
        _write_array(f, p.bias, "<f8")
        _write_array(f, p.bias_momentum, "<f4")
        st = model.stats.get(k)
        if st is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<Bd", 1 if st.mode == "deploy" else 2, st.eps))
            _write_array(f, st.mu, "<f8")
            _write_array(f, st.sigma, "<f8")


def read_model(f) -> TrainedModel:
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        with open(f, "rb") as fh:
            return read_model(fh)
    magic, version, tlen = struct.unpack("<4sHI", _read(f, 10))
    if magic != MAGIC:
        raise ModelFileError("not a model file")
    if version != VERSION:
        raise ModelFileError(f"unsupported model version {version}")
    net = parse_network(_read(f, tlen).decode())
    (count,) = struct.unpack("<I", _read(f, 4))
    params, stats = {}, {}
    for _ in range(count):
        k, real, *shape = struct.unpack("<HB4I", _read(f, _LAYER_HDR))
        shape = tuple(shape)
        size = int(np.prod(shape))
        if real:
            hidden = _read_array(f, shape, "<f8")
            tri = None
        else:
            tri = unpack_trinary(_read(f, (size + 3) // 4), size).reshape(shape)
            hidden = _read_array(f, shape, "<f4")
        mom = _read_array(f, shape, "<f4")
        feats = shape[3]
        bias = _read_array(f, (feats,), "<f8")
        bmom = _read_array(f, (feats,), "<f4")
        params[k] = LayerParams(hidden, tri, bias, mom, bmom)
        (flag,) = struct.unpack("<B", _read(f, 1))
        if flag:
            (eps,) = struct.unpack("<d", _read(f, 8))
            mu = _read_array(f, (feats,), "<f8")
            sigma = _read_array(f, (feats,), "<f8")
            stats[k] = BatchNormStats(mu, sigma, eps, "deploy" if flag == 1 else "batch")
    return TrainedModel(net, params, stats)


def model_bytes(model: TrainedModel) -> bytes:
    buf = io.BytesIO()
    write_model(model, buf)
    return buf.getvalue()


def host_layers(model: TrainedModel) -> list[int]:
    """Layers evaluated off-chip: everything before the first on-chip layer."""
    chip = model.net.chip_layers()
    stop = chip[0] if chip else len(model.net.layers)
    return list(range(stop))


def host_stage_bytes(model: TrainedModel) -> bytes:
    keys = [k for k in host_layers(model) if k in model.params]
    buf = io.BytesIO()
    write_model(model, buf, keys)
    return buf.getvalue()


def host_stage_model(blob: bytes) -> TrainedModel:
    return read_model(io.BytesIO(blob))


def transduce(model: TrainedModel, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Binary spike channels produced by the off-chip layers, as uint8 (N, R, C, F)."""
    images = np.asarray(images, dtype=np.float64)
    layers = host_layers(model)
    out = []
    for i in range(0, len(images), chunk):
        x = images[i:i + chunk]
        for k in layers:
            x, _ = layer_forward(model, k, x, "deploy")
        out.append(x.astype(np.uint8))
    if not out:
        r, c, f = model.net.shapes()[len(layers)]
        return np.zeros((0, r, c, f), np.uint8)
    return np.concatenate(out)
