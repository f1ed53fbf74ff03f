"""Order-independent per-feature mean and population standard deviation.

Sums are accumulated exactly (float64 values are split into integer mantissa
pieces and summed as Python ints), so the result does not depend on how the
data is chunked or ordered.  Batch-mode normalisation and the deploy-mode
statistics both go through here, which keeps the two paths bit-identical.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

_SHIFT = 1100  # places every float64 (subnormals included) on an integer grid
_LO_BITS = 26


def _exact_column_sums(values: np.ndarray) -> list[int]:
    """Exact column sums of a 2-D float64 array, scaled by 2**_SHIFT."""
    mant, expo = np.frexp(values)
    ints = (mant * 2.0**53).astype(np.int64)
    hi = ints >> _LO_BITS
    lo = ints & ((1 << _LO_BITS) - 1)
    totals = [0] * values.shape[1]
    for e in np.unique(expo):
        mask = expo == e
        sh = np.where(mask, hi, 0).sum(axis=0)
        sl = np.where(mask, lo, 0).sum(axis=0)
        scale = int(e) - 53 + _SHIFT
        for f in range(values.shape[1]):
            part = (int(sh[f]) << _LO_BITS) + int(sl[f])
            if part:
                totals[f] += part << scale if scale >= 0 else part >> -scale
    return totals


def _exact_squares(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``values**2`` as an unevaluated float sum ``p + e`` (Veltkamp split, Dekker product)."""
    c = 134217729.0 * values
    hi = c - (c - values)
    lo = values - hi
    p = values * values
    e = ((hi * hi - p) + 2.0 * hi * lo) + lo * lo
    return p, e


class ExactMoments:
    """Streaming accumulator of per-feature first and second moments."""

    def __init__(self, num_features: int):
        self.count = 0
        self._sum = [0] * num_features
        self._sq = [0] * num_features

    def update(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        values = values.reshape(-1, values.shape[-1])
        if values.shape[0] == 0:
            return
        self.count += values.shape[0]
        p, e = _exact_squares(values)
        for acc, arr in ((self._sum, values), (self._sq, p), (self._sq, e)):
            for f, part in enumerate(_exact_column_sums(arr)):
                acc[f] += part

    def result(self) -> tuple[np.ndarray, np.ndarray]:
        if self.count == 0:
            raise ValueError("no samples accumulated")
        denom = self.count << _SHIFT
        mu, sigma = [], []
        for s, q in zip(self._sum, self._sq):
            mean = Fraction(s, denom)
            var = Fraction(q, denom) - mean * mean
            mu.append(float(mean))
            sigma.append(float(max(var, 0)) ** 0.5)
        return np.array(mu), np.array(sigma)


def feature_moments(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std over all leading axes of ``values``."""
    acc = ExactMoments(values.shape[-1])
    acc.update(values)
    return acc.result()
