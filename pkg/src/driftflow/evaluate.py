"""Median-heuristic MMD^2, the sample-quality metric.

Convention: the bandwidth ``m`` is the lower median of the squared distances
over all distinct pairs of the pooled sample (self-pairs excluded), and the
kernel is ``exp(-|x-y|^2 / m)``. MMD^2 is the biased V-statistic, so a batch
compared with itself scores exactly 0.
"""

from __future__ import annotations

from typing import Any

import numpy as np

from .core import RngHandle, as_positions, pairwise_sq_dists


class DegenerateBandwidthError(ValueError):
    pass


def median_bandwidth(points: Any) -> float:
    pts = as_positions(points)
    n = pts.shape[0]
    if n < 2:
        raise DegenerateBandwidthError("median heuristic needs at least two points")
    iu = np.triu_indices(n, k=1)
    sq = pairwise_sq_dists(pts, pts)[iu]
    k = (sq.size - 1) // 2  # lower median
    m = float(np.partition(sq, k)[k])
    if not m > 0:
        raise DegenerateBandwidthError("median pairwise squared distance is zero")
    return m


def mmd2_with_bandwidth(x: np.ndarray, y: np.ndarray, m: float) -> float:
    kxx = np.exp(-pairwise_sq_dists(x, x) / m).mean()
    kyy = np.exp(-pairwise_sq_dists(y, y) / m).mean()
    kxy = np.exp(-pairwise_sq_dists(x, y) / m).mean()
    return float(kxx + kyy - 2.0 * kxy)


def mmd2_median(x_batch: Any, y_batch: Any) -> float:
    x, y = as_positions(x_batch), as_positions(y_batch)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    m = median_bandwidth(np.concatenate([x, y]))
    return max(mmd2_with_bandwidth(x, y, m), 0.0)


def permutation_null(x_batch: Any, y_batch: Any, n_perm: int, rng: RngHandle) -> np.ndarray:
    """``mmd2_median`` over random relabellings of the pooled sample.

    The bandwidth is re-estimated on the pool, which a relabelling leaves
    unchanged, so it is computed once.
    """
    x, y = as_positions(x_batch), as_positions(y_batch)
    pool = np.concatenate([x, y])
    m = median_bandwidth(pool)
    gen = rng.generator()
    n = x.shape[0]
    out = np.empty(n_perm)
    for b in range(n_perm):
        perm = gen.permutation(pool.shape[0])
        out[b] = max(mmd2_with_bandwidth(pool[perm[:n]], pool[perm[n:]], m), 0.0)
    return out
