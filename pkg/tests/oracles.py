"""Reference implementations written independently of the package code paths."""

from __future__ import annotations

import math

import numpy as np


def scalar_forward(model, x):
    """Deploy-mode forward with explicit loops over images, locations and features."""
    net = model.net
    shapes = net.shapes()
    acts = []
    cur = np.asarray(x, np.float64)
    for k, layer in enumerate(net.layers):
        if layer.kind.value == "D":
            acts.append(cur)
            continue
        p, st = model.params[k], model.stats[k]
        w = p.trinary_weights if p.trinary_weights is not None else p.hidden_weights
        h, wd, fin = shapes[k]
        ho, wo, fo = shapes[k + 1]
        in_g = fin // layer.groups
        out_g = fo // layer.groups
        out = np.zeros((len(cur), ho, wo, fo))
        for n in range(len(cur)):
            for r in range(ho):
                for c in range(wo):
                    for f in range(fo):
                        g = f // out_g
                        s = 0.0
                        for i in range(layer.patch_rows):
                            for j in range(layer.patch_cols):
                                rr = r * layer.stride - layer.pad + i
                                cc = c * layer.stride - layer.pad + j
                                if not (0 <= rr < h and 0 <= cc < wd):
                                    continue
                                for q in range(in_g):
                                    s += cur[n, rr, cc, g * in_g + q] * w[i, j, q, f]
                        r_ = (s - st.mu[f]) / (st.sigma[f] + st.eps) + p.bias[f]
                        out[n, r, c, f] = 1.0 if r_ >= 0 else 0.0
        acts.append(out)
        cur = out
    return acts


def vote_scores(net, final):
    """Class votes: feature f at any location votes for f mod C while f < C*(F // C)."""
    n, ho, wo, fo = final.shape
    c = net.num_classes
    scores = np.zeros((n, c), np.int64)
    kept = np.zeros(c, np.int64)
    for r in range(ho):
        for col in range(wo):
            for f in range(fo):
                if fo >= c:
                    if f >= c * (fo // c):
                        continue
                    label = f % c
                else:
                    label = ((r * wo + col) * fo + f) % c
                if kept[label] >= net.features_per_class:
                    continue
                kept[label] += 1
                scores[:, label] += final[:, r, col, f].astype(np.int64)
    return scores


def brute_force_packing(patch, stride, in_features, out_features, lines=256, neurons=256):
    """Largest a*b output block whose input region and neurons fit a core."""
    best = 0
    for a in range(1, 65):
        for b in range(1, 65):
            ra = (a - 1) * stride + patch
            rb = (b - 1) * stride + patch
            if 2 * ra * rb * in_features <= lines and a * b * out_features <= neurons:
                best = max(best, a * b)
    return best


def leak_oracle(b, mu, sigma, eps=1e-4):
    raw = math.ceil(b * (sigma + eps) - mu)
    return max(-255, min(255, raw))


def hysteresis_reference(w_h, w_prev, h):
    """Piecewise quantizer written from the band definitions, one value at a time."""
    if w_h <= -0.5 - h:
        return -1
    if w_h >= 0.5 + h:
        return 1
    if -0.5 + h <= w_h <= 0.5 - h:
        return 0
    if w_h > 0:
        return min(max(int(w_prev), 0), 1)
    return min(max(int(w_prev), -1), 0)


def integrate_fire(v, weights, active, leak, threshold=1, lower=0):
    """One integrate, leak and fire update for a single neuron."""
    v = v + sum(w for w, a in zip(weights, active) if a) + leak
    if v >= threshold:
        return 0, True
    return max(v, lower), False


# -- symbolic chain rule --------------------------------------------------------------


def _bn_layer_jacobians(n, fin, fout, eps):
    """Lambdified pre-activations of one normalised layer and their exact Jacobians."""
    import sympy as sp

    x = sp.Matrix(n, fin, lambda i, j: sp.Symbol(f"x{i}_{j}"))
    w = sp.Matrix(fin, fout, lambda i, j: sp.Symbol(f"w{i}_{j}"))
    b = sp.Matrix(1, fout, lambda i, j: sp.Symbol(f"b{j}"))
    s = x * w
    r = []
    for f in range(fout):
        col = [s[i, f] for i in range(n)]
        mu = sum(col) / n
        sigma = sp.sqrt(sum((c - mu) ** 2 for c in col) / n)
        r.extend((col[i] - mu) / (sigma + eps) + b[0, f] for i in range(n))
    r = sp.Matrix(r)  # feature-major: index f * n + i
    fn = sp.lambdify(list(x) + list(w) + list(b),
                     [r, r.jacobian(list(x)), r.jacobian(list(w)), r.jacobian(list(b))], "numpy")

    def evaluate(xv, wv, bv):
        out = fn(*np.ravel(xv), *np.ravel(wv), *np.ravel(bv))
        rv, jx, jw, jb = (np.array(o, np.float64) for o in out)
        return rv.reshape(fout, n).T, jx, jw, jb

    return evaluate


def _loss_gradient(n, f2, classes, fpc):
    import sympy as sp

    y = sp.Matrix(n, f2, lambda i, j: sp.Symbol(f"y{i}_{j}"))
    t = sp.Matrix(n, classes, lambda i, j: sp.Symbol(f"t{i}_{j}"))
    scale = sp.Symbol("scale")
    loss = 0
    for i in range(n):
        z = [scale * sum(y[i, g] for g in range(f2) if g % classes == c) / fpc
             for c in range(classes)]
        lse = sp.log(sum(sp.exp(v) for v in z))
        loss += -sum(t[i, c] * (z[c] - lse) for c in range(classes)) / n
    fn = sp.lambdify(list(y) + list(t) + [scale], [loss] + [sp.diff(loss, v) for v in y], "numpy")

    def evaluate(yv, onehot, sc):
        out = fn(*np.ravel(yv), *np.ravel(onehot), sc)
        return float(out[0]), np.array(out[1:], np.float64).reshape(n, f2)

    return evaluate


def symbolic_two_layer(n_images=4, n_in=3, f1=4, f2=4, classes=2, eps=1e-4):
    """Gradients of a 1x1-input, two-layer binary network from symbolic Jacobians.

    sympy differentiates each normalised layer and the readout loss; the step
    is replaced by the triangular surrogate where the Jacobians are chained,
    and the sparsity cost ``gamma/2 * sum(mean(y)**2)`` is added per layer.
    Returns ``(x, w1, b1, w2, b2, onehot, gamma, scale) -> (loss, dw1, db1, dw2, db2)``.
    """
    l1 = _bn_layer_jacobians(n_images, n_in, f1, eps)
    l2 = _bn_layer_jacobians(n_images, f1, f2, eps)
    head = _loss_gradient(n_images, f2, classes, f2 // classes)

    def surr(r):
        return np.maximum(0.0, 1.0 - np.abs(r))

    def feature_major(a):
        return a.T.reshape(-1)

    def evaluate(x, w1, b1, w2, b2, onehot, gamma, scale):
        n = len(x)
        r1, _, j1w, j1b = l1(x, w1, b1)
        y1 = (r1 >= 0).astype(np.float64)
        r2, j2x, j2w, j2b = l2(y1, w2, b2)
        y2 = (r2 >= 0).astype(np.float64)
        loss, gy2 = head(y2, onehot, scale)
        for y in (y1, y2):
            loss += 0.5 * gamma * float(np.sum(y.mean(axis=0) ** 2))
        gr2 = feature_major((gy2 + gamma * y2.mean(axis=0) / n) * surr(r2))
        gy1 = (gr2 @ j2x).reshape(n, -1) + gamma * y1.mean(axis=0) / n
        gr1 = feature_major(gy1 * surr(r1))
        return (loss, (gr1 @ j1w).reshape(w1.shape), gr1 @ j1b,
                (gr2 @ j2w).reshape(w2.shape), gr2 @ j2b)

    return evaluate
