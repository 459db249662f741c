"""Distribution distances for sample quality: sliced Wasserstein and MMD.

Both flatten inputs to (N, D) and accumulate in float64. The projection
directions for SWD come from a fixed seed so repeated evaluations of the
same arrays give identical numbers.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError

SWD_PROJECTIONS = 128
SWD_SEED = 1234


def _flatten(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None]
    return x.reshape(x.shape[0], -1)


def _wasserstein_1d(a, b):
    # Equal counts reduce to the mean gap of sorted samples; otherwise
    # compare the two quantile functions on a midpoint grid.
    a = np.sort(a)
    b = np.sort(b)
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    q = (np.arange(max(a.size, b.size)) + 0.5) / max(a.size, b.size)
    qa = np.quantile(a, q, method="linear")
    qb = np.quantile(b, q, method="linear")
    return float(np.mean(np.abs(qa - qb)))


def sliced_wasserstein(samples, reference, projections=SWD_PROJECTIONS,
                       seed=SWD_SEED):
    """Mean 1-d Wasserstein distance over random unit-vector projections."""
    a = _flatten(samples)
    b = _flatten(reference)
    if a.shape[1] != b.shape[1]:
        raise UsageError("sample dimensionality mismatch")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for u in dirs:
        total += _wasserstein_1d(a @ u, b @ u)
    return total / projections


def mmd_rbf(samples, reference):
    """Unbiased MMD^2 with a median-heuristic RBF bandwidth.

    The bandwidth is the median pairwise squared distance over the pooled
    sample; the unbiased estimator can be slightly negative.
    """
    a = _flatten(samples)
    b = _flatten(reference)
    if a.shape[1] != b.shape[1]:
        raise UsageError("sample dimensionality mismatch")
    pooled = np.concatenate([a, b])
    d2 = _pairwise_sq(pooled, pooled)
    med = np.median(d2[np.triu_indices(len(pooled), k=1)])
    if med <= 0:
        med = 1.0
    gamma = 1.0 / med
    kaa = np.exp(-gamma * _pairwise_sq(a, a))
    kbb = np.exp(-gamma * _pairwise_sq(b, b))
    kab = np.exp(-gamma * _pairwise_sq(a, b))
    n, m = len(a), len(b)
    np.fill_diagonal(kaa, 0.0)
    np.fill_diagonal(kbb, 0.0)
    return float(kaa.sum() / (n * (n - 1)) + kbb.sum() / (m * (m - 1))
                 - 2.0 * kab.mean())


def _pairwise_sq(a, b):
    aa = (a * a).sum(axis=1)
    bb = (b * b).sum(axis=1)
    d2 = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def evaluate(samples, reference, min_count=500):
    """(SWD, MMD) pair with the floor on sample counts enforced."""
    a = _flatten(samples)
    b = _flatten(reference)
    if len(a) < min_count or len(b) < min_count:
        raise UsageError(
            f"need at least {min_count} samples per side, "
            f"got {len(a)} and {len(b)}")
    return sliced_wasserstein(a, b), mmd_rbf(a, b)
