"""Exponential mechanism over data-induced split buckets.

Numerical features are tiled into intervals between consecutive distinct data
values (plus the feature border); each interval is one candidate bucket whose
mass is its width.  Categorical features contribute one unit bucket per value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.special import logsumexp

from .data import FeatureSpec


@dataclass(frozen=True)
class FeatureBuckets:
    feature: int
    categorical: bool
    lo: np.ndarray        # lower endpoints (category codes for categorical)
    hi: np.ndarray        # upper endpoints (code + 1 for categorical)
    weight: float

    @property
    def widths(self) -> np.ndarray:
        return np.ones_like(self.lo) if self.categorical else self.hi - self.lo

    def __len__(self) -> int:
        return self.lo.shape[0]


@dataclass(frozen=True)
class BucketSet:
    features: tuple

    def __len__(self) -> int:
        return sum(len(f) for f in self.features)


def numerical_edges(values, v_min: float, v_max: float) -> np.ndarray:
    """Sorted distinct data values inside the border, framed by the border."""
    v = np.asarray(values, dtype=float)
    v = v[(v > v_min) & (v < v_max)]
    return np.unique(np.concatenate([[v_min], v, [v_max]]))


def build_buckets(X, schema: Sequence[FeatureSpec], r: float) -> BucketSet:
    X = np.asarray(X, dtype=float).reshape(-1, len(schema))
    out = []
    for i, f in enumerate(schema):
        if f.is_categorical:
            codes = np.arange(len(f.values), dtype=float)
            out.append(FeatureBuckets(i, True, codes, codes + 1.0, 1.0))
        else:
            edges = numerical_edges(X[:, i], f.v_min, f.v_max)
            out.append(FeatureBuckets(i, False, edges[:-1], edges[1:],
                                      float(r) / (f.v_max - f.v_min)))
    return BucketSet(tuple(out))


def mse_gain(left, right, lam: float) -> float:
    """Split gain (sum g_L)^2 / (n_L + lam) + (sum g_R)^2 / (n_R + lam)."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    return float(left.sum() ** 2 / (left.size + lam) + right.sum() ** 2 / (right.size + lam))


def _gain_from_sums(sl, nl, total_s, total_n, lam):
    sr = total_s - sl
    nr = total_n - nl
    return sl * sl / (nl + lam) + sr * sr / (nr + lam)


def bucket_gains(fb: FeatureBuckets, x, g, lam: float) -> np.ndarray:
    """Gain of each bucket, evaluated at its lower endpoint.

    Numerical rows go left when ``x <= lo``; categorical rows when ``x == code``.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    total_s, total_n = float(g.sum()), x.shape[0]
    if fb.categorical:
        k = len(fb)
        codes = x.astype(np.int64)
        nl = np.bincount(codes, minlength=k)[:k].astype(float)
        sl = np.bincount(codes, weights=g, minlength=k)[:k]
    else:
        order = np.argsort(x, kind="stable")
        xs = x[order]
        cs = np.concatenate([[0.0], np.cumsum(g[order])])
        pos = np.searchsorted(xs, fb.lo, side="right")
        nl = pos.astype(float)
        sl = cs[pos]
    return _gain_from_sums(sl, nl, total_s, total_n, lam)


def selection_logits(B: BucketSet, utilities: List[np.ndarray], delta_u: float,
                     eps: float) -> List[np.ndarray]:
    """Unnormalised log-probabilities ``log(w |B|) + eps u / (2 delta_u)``."""
    if delta_u <= 0 or eps < 0:
        raise ValueError("need delta_u > 0 and eps >= 0")
    out = []
    for fb, u in zip(B.features, utilities):
        with np.errstate(divide="ignore"):
            base = np.log(fb.weight * fb.widths)
        out.append(base + eps * np.asarray(u, dtype=float) / (2.0 * delta_u))
    return out


def selection_probabilities(B: BucketSet, utilities, delta_u: float, eps: float) -> np.ndarray:
    logits = np.concatenate(selection_logits(B, utilities, delta_u, eps))
    # -inf is a zero-width bucket; NaN or +inf means a non-finite utility
    if np.isnan(logits).any() or np.isposinf(logits).any():
        raise ValueError("utilities must be finite")
    return np.exp(logits - logsumexp(logits))


def gridless_exp_mech(B: BucketSet, utilities, delta_u: float, eps: float, rng) -> tuple:
    """Sample (feature index, split value).

    ``utilities`` holds one array per feature aligned with its buckets, or is
    a callable ``FeatureBuckets -> array``.
    """
    if callable(utilities):
        utilities = [utilities(fb) for fb in B.features]
    p = selection_probabilities(B, utilities, delta_u, eps)
    if not np.isfinite(p).all() or p.sum() <= 0:
        raise ValueError("all selection probabilities are zero")
    j = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    j = min(j, p.shape[0] - 1)
    u = rng.random()  # drawn for every outcome to keep stream consumption fixed
    for fb in B.features:
        if j < len(fb):
            if fb.categorical:
                return fb.feature, float(fb.lo[j])
            return fb.feature, float(fb.lo[j] + u * (fb.hi[j] - fb.lo[j]))
        j -= len(fb)
    raise AssertionError("bucket index out of range")


def select_split(X, g, schema: Sequence[FeatureSpec], r: float, lam: float, delta_u: float,
                 eps: float, rng) -> tuple:
    """Build buckets on ``X`` and draw one split with the MSE gain utility."""
    X = np.asarray(X, dtype=float).reshape(-1, len(schema))
    B = build_buckets(X, schema, r)
    utilities = [bucket_gains(fb, X[:, fb.feature], g, lam) for fb in B.features]
    return gridless_exp_mech(B, utilities, delta_u, eps, rng)
