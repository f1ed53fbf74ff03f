"""Constrained backpropagation for binary-neuron, trinary-weight convolutional networks.

Tensors are laid out ``(batch, rows, cols, features)``.  Filters are stored as
``(patch_rows, patch_cols, in_features_per_group, out_features)``; output
features ``[g*out_g, (g+1)*out_g)`` read input features ``[g*in_g, (g+1)*in_g)``.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .moments import ExactMoments, feature_moments
from .netspec import LayerKind, LayerSpec, NetworkSpec

log = logging.getLogger(__name__)

EPS = 1e-4


class ShapeError(ValueError):
    pass


# -- elementwise pieces ---------------------------------------------------------------


def weighted_sum(x, w) -> float:
    """Summed weighted input of one neuron over its support region."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.shape != w.shape:
        raise ShapeError(f"support {x.shape} does not match filter {w.shape}")
    return (x * w).sum()


def batch_norm(s, mu, sigma, b, eps: float = EPS):
    return (s - mu) / (sigma + eps) + b


def binary_activation(r):
    return (np.asarray(r) >= 0).astype(np.uint8)


def surrogate_derivative(r):
    """Triangular stand-in for the derivative of the step activation."""
    return np.maximum(0.0, 1.0 - np.abs(r))


def project_weight(w_h, w_prev, h: float = 0.1):
    """Round hidden weights to {-1, 0, +1}, holding ``w_prev`` inside the dead bands."""
    w_h = np.asarray(w_h, dtype=np.float64)
    out = np.asarray(w_prev, dtype=np.int8).copy() if np.ndim(w_prev) else np.full(
        w_h.shape, w_prev, dtype=np.int8)
    out = np.broadcast_to(out, w_h.shape).copy()
    # a held value is limited to the two levels adjoining its gap, which keeps
    # the map monotone in w_h even for a w_prev the gap could not have produced
    out[w_h > 0] = np.clip(out[w_h > 0], 0, 1)
    out[w_h < 0] = np.clip(out[w_h < 0], -1, 0)
    out[(w_h >= -0.5 + h) & (w_h <= 0.5 - h)] = 0
    out[w_h <= -0.5 - h] = -1  # at h = 0 the bands touch; ties round away from zero
    out[w_h >= 0.5 + h] = 1
    return out if out.ndim else out[()]


def sparsity_penalty(mean_activations, gamma: float):
    """Cost ``gamma/2 * sum(ybar**2)`` and its gradient with respect to ``ybar``."""
    ybar = np.asarray(mean_activations, dtype=np.float64)
    return 0.5 * gamma * float(np.sum(ybar * ybar)), gamma * ybar


# -- containers -----------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.1
    lr_drops: tuple[int, int] | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-7
    gamma: float = 1e-4
    hysteresis: float = 0.1
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    logit_scale: float = 1.0
    bias_lr: float | None = None  # initial bias rate (follows the same drops); None = lr

    def __post_init__(self):
        for name in ("lr", "bias_lr", "momentum", "weight_decay", "gamma", "hysteresis",
                     "logit_scale"):
            if (getattr(self, name) or 0) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.hysteresis < 0.5:
            raise ValueError("hysteresis must be below 0.5")

    @classmethod
    def for_chips(cls, chips: float, **kw) -> "TrainConfig":
        """Defaults by network size: no weight decay below 4 chips, no sparsity at <= 1/2."""
        kw.setdefault("weight_decay", 0.0 if chips < 4 else 1e-7)
        kw.setdefault("gamma", 0.0 if chips <= 0.5 else 1e-4)
        return cls(**kw)

    def drops(self) -> tuple[int, int]:
        if self.lr_drops is not None:
            return tuple(self.lr_drops)
        return (self.epochs // 2, (3 * self.epochs) // 4)

    def learning_rate(self, epoch: int) -> float:
        return self.lr * 0.1 ** sum(epoch >= d for d in self.drops())

    def bias_learning_rate(self, epoch: int) -> float:
        base = self.lr if self.bias_lr is None else self.bias_lr
        return base * 0.1 ** sum(epoch >= d for d in self.drops())


@dataclass
class LayerParams:
    hidden_weights: np.ndarray
    trinary_weights: np.ndarray | None  # None for the full-precision transduction layer
    bias: np.ndarray
    momentum: np.ndarray
    bias_momentum: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        if self.trinary_weights is None:
            return self.hidden_weights
        return self.trinary_weights


@dataclass
class BatchNormStats:
    mu: np.ndarray
    sigma: np.ndarray
    eps: float = EPS
    mode: str = "deploy"


@dataclass
class TrainedModel:
    net: NetworkSpec
    params: dict[int, LayerParams]
    stats: dict[int, BatchNormStats] = field(default_factory=dict)

    @property
    def deployable(self) -> bool:
        return all(k in self.stats and self.stats[k].mode == "deploy"
                   for k in self.net.compute_layers())


def filter_shape(net: NetworkSpec, k: int) -> tuple[int, int, int, int]:
    layer = net.layers[k]
    in_feats = net.shapes()[k][2]
    return (layer.patch_rows, layer.patch_cols, in_feats // layer.groups, layer.features)


def init_model(net: NetworkSpec, seed: int = 0, hysteresis: float = 0.1) -> TrainedModel:
    """Hidden weights uniform in [-1, 1], zero biases, trinary weights projected."""
    rng = np.random.default_rng(seed)
    params = {}
    for k in net.compute_layers():
        shape = filter_shape(net, k)
        w_h = rng.uniform(-1.0, 1.0, size=shape)
        real = net.layers[k].kind is LayerKind.TRANSDUCTION
        tri = None if real else project_weight(w_h, 0, hysteresis)
        feats = shape[3]
        params[k] = LayerParams(w_h, tri, np.zeros(feats), np.zeros(shape), np.zeros(feats))
    return TrainedModel(net, params)


# -- convolution plumbing -------------------------------------------------------------


def _windows(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Patches of ``x`` as ``(N, out_r, out_c, patch_r, patch_c, C)`` (a view when pad=0)."""
    p = layer.pad
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(x, (layer.patch_rows, layer.patch_cols), axis=(1, 2))
    win = win[:, ::layer.stride, ::layer.stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv_sum(x: np.ndarray, w: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Grouped weighted sums ``s`` for every output location and feature."""
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D tensor, got shape {x.shape}")
    kh, kw, in_g, feats = w.shape
    if x.shape[3] != in_g * layer.groups:
        raise ShapeError(f"input has {x.shape[3]} features, filter expects {in_g * layer.groups}")
    win = _windows(x, layer)
    n, ho, wo = win.shape[:3]
    out_g = feats // layer.groups
    s = np.empty((n, ho, wo, feats))
    wf = w.astype(np.float64)
    for g in range(layer.groups):
        cols = win[..., g * in_g:(g + 1) * in_g].reshape(n * ho * wo, kh * kw * in_g)
        wg = wf[..., g * out_g:(g + 1) * out_g].reshape(kh * kw * in_g, out_g)
        s[..., g * out_g:(g + 1) * out_g] = (cols @ wg).reshape(n, ho, wo, out_g)
    return s


def _conv_backward(x, w, ds, layer: LayerSpec, need_dx: bool):
    kh, kw, in_g, feats = w.shape
    out_g = feats // layer.groups
    win = _windows(x, layer)
    n, ho, wo = win.shape[:3]
    dw = np.empty(w.shape)
    wf = w.astype(np.float64)
    p, st = layer.pad, layer.stride
    dxp = np.zeros((n, x.shape[1] + 2 * p, x.shape[2] + 2 * p, x.shape[3])) if need_dx else None
    for g in range(layer.groups):
        dsg = ds[..., g * out_g:(g + 1) * out_g].reshape(n * ho * wo, out_g)
        cols = win[..., g * in_g:(g + 1) * in_g].reshape(n * ho * wo, kh * kw * in_g)
        dw[..., g * out_g:(g + 1) * out_g] = (cols.T @ dsg).reshape(kh, kw, in_g, out_g)
        if need_dx:
            wg = wf[..., g * out_g:(g + 1) * out_g].reshape(kh * kw * in_g, out_g)
            dcols = (dsg @ wg.T).reshape(n, ho, wo, kh, kw, in_g)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + st * ho:st, j:j + st * wo:st, g * in_g:(g + 1) * in_g] += \
                        dcols[:, :, :, i, j, :]
    dx = None
    if need_dx:
        dx = dxp[:, p:p + x.shape[1], p:p + x.shape[2], :]
    return dw, dx


# -- forward / backward ---------------------------------------------------------------


@dataclass
class LayerCache:
    x: np.ndarray
    s: np.ndarray | None = None
    r: np.ndarray | None = None
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    mask: np.ndarray | None = None


@dataclass
class ForwardResult:
    activations: list[np.ndarray]  # entry k = output of layer k
    scores: np.ndarray
    predictions: np.ndarray
    caches: list[LayerCache]


@functools.lru_cache(maxsize=32)
def _readout_matrix(net: NetworkSpec) -> np.ndarray:
    labels = np.array(net.readout_labels(), dtype=np.int64)
    m = np.zeros((len(labels), net.num_classes))
    used = labels >= 0
    m[np.flatnonzero(used), labels[used]] = 1.0
    m.setflags(write=False)
    return m


def readout_matrix(net: NetworkSpec) -> np.ndarray:
    """One-hot (outputs, classes) matrix of the voting assignment (read-only, cached)."""
    return _readout_matrix(net)


def readout_classes(net: NetworkSpec) -> np.ndarray:
    """Class label of each flattened final output, -1 where unassigned."""
    m = readout_matrix(net)
    return np.where(m.any(axis=1), m.argmax(axis=1), -1)


def class_scores(net: NetworkSpec, final: np.ndarray) -> np.ndarray:
    """Vote counts per class from binary final-layer outputs."""
    flat = final.reshape(final.shape[0], -1)
    return np.rint(flat @ readout_matrix(net)).astype(np.int64)


def layer_forward(model: TrainedModel, k: int, x: np.ndarray, mode: str = "deploy",
                  train: bool = False, rng: np.random.Generator | None = None):
    layer = model.net.layers[k]
    if layer.kind is LayerKind.DROPOUT:
        if train and layer.dropout_rate > 0:
            mask = (rng.random(x.shape) >= layer.dropout_rate).astype(x.dtype)
            return x * mask, LayerCache(x, mask=mask)
        return x, LayerCache(x)
    p = model.params[k]
    s = conv_sum(x, p.weights, layer)
    if mode == "batch":
        mu, sigma = feature_moments(s)
    elif mode == "deploy":
        st = model.stats.get(k)
        if st is None or st.mode != "deploy":
            raise ValueError(f"layer {k} has no deploy-mode statistics")
        mu, sigma = st.mu, st.sigma
    else:
        raise ValueError(f"unknown mode {mode!r}")
    r = batch_norm(s, mu, sigma, p.bias)
    y = (r >= 0).astype(np.float64)
    return y, LayerCache(x, s, r, mu, sigma)


def forward(model: TrainedModel, x: np.ndarray, mode: str = "deploy", train: bool = False,
            rng: np.random.Generator | None = None, start: int = 0) -> ForwardResult:
    """Run layers ``start..end``; ``x`` is the input to layer ``start``."""
    net = model.net
    expect = net.shapes()[start]
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ShapeError(f"input shape {x.shape[1:]} does not match network {expect}")
    acts, caches = [], []
    for k in range(start, len(net.layers)):
        x, cache = layer_forward(model, k, x, mode, train, rng)
        acts.append(x)
        caches.append(cache)
    if start:
        acts = [None] * start + acts
        caches = [None] * start + caches
    scores = class_scores(net, acts[-1])
    return ForwardResult(acts, scores, np.argmax(scores, axis=1), caches)


def classification_loss(net: NetworkSpec, scores: np.ndarray, labels: np.ndarray,
                        logit_scale: float = 1.0):
    """Cross-entropy over vote counts scaled by 1/features_per_class; returns (loss, dscores)."""
    n = scores.shape[0]
    z = scores * (logit_scale / net.features_per_class)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    loss = -float(np.mean(np.log(p[np.arange(n), labels])))
    dz = p.copy()
    dz[np.arange(n), labels] -= 1.0
    return loss, dz * (logit_scale / net.features_per_class) / n


def _bn_backward(dr, s, mu, sigma, eps=EPS):
    axes = (0, 1, 2)
    n = s.shape[0] * s.shape[1] * s.shape[2]
    d = sigma + eps
    centered = s - mu
    ds = (dr - dr.mean(axis=axes)) / d
    safe = np.where(sigma > 0, sigma, 1.0)
    coef = np.where(sigma > 0, (dr * centered).sum(axis=axes) / (n * safe * d * d), 0.0)
    return ds - centered * coef


@dataclass
class Gradients:
    weights: dict[int, np.ndarray]
    bias: dict[int, np.ndarray]
    loss: float
    sparsity_cost: float


def backward(model: TrainedModel, fwd: ForwardResult, labels: np.ndarray,
             gamma: float = 0.0, logit_scale: float = 1.0) -> Gradients:
    """Chain rule with the surrogate derivative in place of the step function."""
    net = model.net
    final = fwd.activations[-1]
    ce, dscores = classification_loss(net, fwd.scores, labels, logit_scale)
    dy = (dscores @ readout_matrix(net).T).reshape(final.shape)

    sparse_cost = 0.0
    gw, gb = {}, {}
    first = net.compute_layers()[0]
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        cache = fwd.caches[k]
        if layer.kind is LayerKind.DROPOUT:
            if cache.mask is not None:
                dy = dy * cache.mask
            continue
        if gamma:
            # activations[k] is this layer's own output, ahead of any dropout layer
            yk = fwd.activations[k]
            ybar = yk.mean(axis=(0, 1, 2))
            c, g = sparsity_penalty(ybar, gamma)
            sparse_cost += c
            dy = dy + g / (yk.shape[0] * yk.shape[1] * yk.shape[2])
        dr = dy * surrogate_derivative(cache.r)
        gb[k] = dr.sum(axis=(0, 1, 2))
        ds = _bn_backward(dr, cache.s, cache.mu, cache.sigma)
        dw, dx = _conv_backward(cache.x, model.params[k].weights, ds, layer, need_dx=k > first)
        gw[k] = dw
        dy = dx
    return Gradients(gw, gb, ce + sparse_cost, sparse_cost)


def sgd_step(model: TrainedModel, grads: Gradients, config: TrainConfig, epoch: int) -> None:
    """Momentum update of hidden weights, clipping to [-1, 1], hysteresis projection."""
    lr = config.learning_rate(epoch)
    for k, p in model.params.items():
        if k not in grads.weights:
            continue
        p.momentum *= config.momentum
        p.momentum -= lr * (grads.weights[k] + config.weight_decay * p.hidden_weights)
        p.bias_momentum *= config.momentum
        p.bias_momentum -= config.bias_learning_rate(epoch) * grads.bias[k]
        p.bias += p.bias_momentum
        if p.trinary_weights is None:
            p.hidden_weights += p.momentum
        else:
            np.clip(p.hidden_weights + p.momentum, -1.0, 1.0, out=p.hidden_weights)
            p.trinary_weights = project_weight(p.hidden_weights, p.trinary_weights,
                                               config.hysteresis)


def finalize_deploy_stats(model: TrainedModel, x_train: np.ndarray, chunk: int = 512) -> None:
    """Per-filter mean and std of ``s`` over every location of the whole training set."""
    x_train = np.asarray(x_train, dtype=np.float64)
    if len(x_train) == 0:
        raise ValueError("empty training set")
    model.stats = {}
    acts = x_train
    for k, layer in enumerate(model.net.layers):
        if layer.kind is LayerKind.DROPOUT:
            continue
        p = model.params[k]
        acc = ExactMoments(layer.features)
        for i in range(0, len(acts), chunk):
            acc.update(conv_sum(acts[i:i + chunk], p.weights, layer))
        mu, sigma = acc.result()
        model.stats[k] = BatchNormStats(mu, sigma, EPS, "deploy")
        outs = []
        for i in range(0, len(acts), chunk):
            y, _ = layer_forward(model, k, acts[i:i + chunk], "deploy")
            outs.append(y.astype(np.uint8))
        acts = np.concatenate(outs)


def predict(model: TrainedModel, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(x), chunk):
        out.append(forward(model, x[i:i + chunk], "deploy").predictions)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def total_spikes(model: TrainedModel, x: np.ndarray, chunk: int = 512, on_chip_only=True) -> int:
    """Deploy-mode spike count summed over layers (on-chip layers by default)."""
    net = model.net
    keep = net.chip_layers() if on_chip_only else net.compute_layers()
    total = 0
    for i in range(0, len(x), chunk):
        fwd = forward(model, x[i:i + chunk], "deploy")
        total += sum(int(fwd.activations[k].sum()) for k in keep)
    return total


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    spike_rate: float
    lr: float
    test_accuracy: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def train(net: NetworkSpec, x: np.ndarray, y: np.ndarray, config: TrainConfig,
          x_test: np.ndarray | None = None, y_test: np.ndarray | None = None,
          callback=None) -> tuple[TrainedModel, list[EpochRecord]]:
    """Train from scratch, then fix deploy-mode normalisation statistics."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[1:] != net.shapes()[0]:
        raise ShapeError(f"data shape {x.shape[1:]} does not match network input {net.shapes()[0]}")
    rng = np.random.default_rng(config.seed)
    model = init_model(net, int(rng.integers(2**31)), config.hysteresis)
    records = []
    compute = net.compute_layers()
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        tot_loss = correct = 0.0
        spikes = units = 0
        for i in range(0, len(x), config.batch_size):
            idx = order[i:i + config.batch_size]
            if len(idx) < 2:
                continue
            fwd = forward(model, x[idx], "batch", train=True, rng=rng)
            grads = backward(model, fwd, y[idx], config.gamma, config.logit_scale)
            sgd_step(model, grads, config, epoch)
            tot_loss += grads.loss * len(idx)
            correct += float((fwd.predictions == y[idx]).sum())
            for k in compute:
                a = fwd.caches[k].r >= 0
                spikes += int(a.sum())
                units += a.size
        rec = EpochRecord(epoch, tot_loss / len(x), correct / len(x), spikes / max(units, 1),
                          config.learning_rate(epoch))
        records.append(rec)
        if callback:
            callback(model, rec)
        log.info("epoch %d loss %.4f acc %.4f rate %.4f", epoch, rec.loss, rec.accuracy,
                 rec.spike_rate)
    finalize_deploy_stats(model, x)
    if x_test is not None and records:
        records[-1].test_accuracy = float(np.mean(predict(model, x_test) == y_test))
    return model, records
