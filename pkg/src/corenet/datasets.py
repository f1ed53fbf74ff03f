"""Dataset ingestion: CIFAR-style binary records, IDX files and feature CSVs.

All loaders return ``(x, y)`` with ``x`` float64 shaped (N, rows, cols,
channels) and scaled to [0, 1], and ``y`` int64 labels.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("image_rgb", "grayscale_idx", "tensor_csv")


class DatasetError(ValueError):
    pass


class ShapeMismatch(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetSource:
    kind: str
    path: str
    labels_path: str | None = None  # IDX label file
    shape: tuple[int, int, int] | None = None  # required for tensor_csv
    split: str = "train"
    limit: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DatasetError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.split not in ("train", "test"):
            raise DatasetError("split must be train or test")

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "image_rgb":
            x, y = read_cifar(self.path)
        elif self.kind == "grayscale_idx":
            if self.labels_path is None:
                raise DatasetError("IDX datasets need a label file")
            x, y = read_idx_images(self.path), read_idx_labels(self.labels_path)
            if len(x) != len(y):
                raise DatasetError(f"{len(x)} images but {len(y)} labels")
        else:
            if self.shape is None:
                raise DatasetError("tensor_csv datasets need an explicit shape")
            x, y = read_tensor_csv(self.path, self.shape)
        if self.limit is not None:
            x, y = x[:self.limit], y[:self.limit]
        return x, y


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


# -- CIFAR-style: 1 label byte + 3x1024 channel planes per record ---------------------

CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar(path) -> tuple[np.ndarray, np.ndarray]:
    with _open(path) as fh:
        raw = np.frombuffer(fh.read(), np.uint8)
    if len(raw) % CIFAR_RECORD:
        raise DatasetError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    y = rec[:, 0].astype(np.int64)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return x.astype(np.float64) / 255.0, y


def write_cifar(path, x_uint8: np.ndarray, y: np.ndarray) -> None:
    x = np.asarray(x_uint8, np.uint8).transpose(0, 3, 1, 2).reshape(len(x_uint8), -1)
    rec = np.concatenate([np.asarray(y, np.uint8)[:, None], x], axis=1)
    Path(path).write_bytes(rec.tobytes())


# -- IDX ------------------------------------------------------------------------------


def _read_idx(path) -> np.ndarray:
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise DatasetError(f"{path}: not an IDX file")
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DatasetError(f"{path}: only unsigned-byte IDX files are supported")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    body = np.frombuffer(data, np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: payload does not match header dims {dims}")
    return body.reshape(dims)


def read_idx_images(path) -> np.ndarray:
    arr = _read_idx(path)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise DatasetError(f"{path}: expected 3-D image array")
    return arr.astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    arr = _read_idx(path)
    if arr.ndim != 1:
        raise DatasetError(f"{path}: expected 1-D label array")
    return arr.astype(np.int64)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, np.uint8)
    head = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


# -- precomputed feature tensors ------------------------------------------------------


def read_tensor_csv(path, shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``label, v0, v1, ...`` in (row, col, channel) order, min-max scaled per channel."""
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.size == 0:
        return np.zeros((0, *shape)), np.zeros(0, np.int64)
    expect = int(np.prod(shape))
    if data.shape[1] != expect + 1:
        raise ShapeMismatch(f"{path}: rows carry {data.shape[1] - 1} values, shape {shape} "
                            f"needs {expect}")
    y = data[:, 0].astype(np.int64)
    x = data[:, 1:].reshape(-1, *shape)
    lo = x.min(axis=(0, 1, 2), keepdims=True)
    hi = x.max(axis=(0, 1, 2), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (x - lo) / span, y


def write_tensor_csv(path, x: np.ndarray, y: np.ndarray) -> None:
    rows = np.concatenate([np.asarray(y, np.float64)[:, None], x.reshape(len(x), -1)], axis=1)
    np.savetxt(path, rows, delimiter=",", fmt="%.9g")


def check_shape(x: np.ndarray, shape: tuple[int, int, int], what: str = "dataset") -> None:
    if tuple(x.shape[1:]) != tuple(shape):
        raise ShapeMismatch(f"{what} shape {tuple(x.shape[1:])} does not match network input "
                            f"{tuple(shape)}")


# -- small built-in sets --------------------------------------------------------------


def synthetic_blobs(n: int, rows: int = 8, cols: int = 8, seed: int = 0,
                    noise: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Two linearly separable classes: a bright left half versus a bright right half."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = np.zeros((n, rows, cols, 1))
    half = cols // 2
    x[y == 0, :, :half] = 0.8
    x[y == 1, :, half:] = 0.8
    x += rng.normal(0, noise, x.shape)
    return np.clip(x, 0, 1), y.astype(np.int64)


def mnist_subset() -> tuple[np.ndarray, np.ndarray]:
    """The 5000-image MNIST sample bundled with ``mlxtend`` (28x28, 10 classes)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # optional dependency
        raise DatasetError("the bundled MNIST subset needs the 'mlxtend' package") from exc
    x, y = mnist_data()
    return x.reshape(-1, 28, 28, 1).astype(np.float64) / 255.0, y.astype(np.int64)


def digits() -> tuple[np.ndarray, np.ndarray]:
    """scikit-learn's 8x8 handwritten digits (1797 images, 10 classes)."""
    try:
        from sklearn.datasets import load_digits
    except ImportError as exc:  # optional dependency
        raise DatasetError("the digits set needs the 'scikit-learn' package") from exc
    d = load_digits()
    return d.images[..., None] / 16.0, d.target.astype(np.int64)


def resize(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Bilinear resampling of (N, R, C, F) images, clipped back to [0, 1]."""
    from scipy.ndimage import zoom

    if x.shape[1:3] == (rows, cols):
        return x
    f = (1, rows / x.shape[1], cols / x.shape[2], 1)
    return np.clip(zoom(x, f, order=1, grid_mode=True, mode="nearest"), 0.0, 1.0)


BUILTINS = ("blobs", "mnist5k", "digits")


def builtin(name: str, seed: int = 0, shape: tuple[int, int, int] | None = None,
            n: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Bundled sets; image sets are resampled to ``shape`` when its channels match."""
    if name == "blobs":
        rows, cols = shape[:2] if shape else (8, 8)
        return synthetic_blobs(n, rows, cols, seed)
    if name == "mnist5k":
        x, y = mnist_subset()
    elif name == "digits":
        x, y = digits()
    else:
        raise DatasetError(f"unknown builtin dataset {name!r}; choose from {BUILTINS}")
    if shape is not None and shape[2] == x.shape[3]:
        x = resize(x, shape[0], shape[1])
    return x, y


def split(x, y, test_fraction: float = 0.2, seed: int = 0):
    perm = np.random.default_rng(seed).permutation(len(x))
    n_test = int(round(len(x) * test_fraction))
    te, tr = perm[:n_test], perm[n_test:]
    return x[tr], y[tr], x[te], y[te]
