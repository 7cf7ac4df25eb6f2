"""MMD-flow drift with (multi-bandwidth) Gibbs kernels, and the sliced
Wasserstein drift built from sorted 1D transport maps."""

from __future__ import annotations

from typing import Any

import numpy as np

from .core import RngHandle, as_positions, pairwise_sq_dists
from .kernels import KernelSpec


def _mean_kernel_grad(x: np.ndarray, z: np.ndarray, taus) -> np.ndarray:
    """``(1/|z|) sum_k grad_x k(x_i, z_k)`` summed over bandwidths."""
    sq = pairwise_sq_dists(x, z)
    out = np.zeros_like(x)
    for t in taus:
        k = np.exp(-sq / t)
        # grad_x k(x, z) = -(2/t) (x - z) k(x, z)
        out += (-2.0 / t) * (k.sum(axis=1)[:, None] * x - k @ z) / z.shape[0]
    return out


def mmd_drift(spec: KernelSpec, x_batch: Any, y_batch: Any, query: Any = None) -> np.ndarray:
    """Minus the gradient of the empirical MMD witness at the model samples."""
    x, y = as_positions(x_batch), as_positions(y_batch)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    q = x if query is None else as_positions(query)
    return _mean_kernel_grad(q, y, spec.taus) - _mean_kernel_grad(q, x, spec.taus)


def mmd_witness(spec: KernelSpec, x_batch: Any, y_batch: Any, query: Any) -> np.ndarray:
    """``mean_k k(., x_k) - mean_j k(., y_j)`` at the query rows."""
    x, y, q = as_positions(x_batch), as_positions(y_batch), as_positions(query)
    out = np.zeros(q.shape[0])
    for t in spec.taus:
        out += np.exp(-pairwise_sq_dists(q, x) / t).mean(axis=1)
        out -= np.exp(-pairwise_sq_dists(q, y) / t).mean(axis=1)
    return out


def mmd2(spec: KernelSpec, x_batch: Any, y_batch: Any) -> float:
    """Biased (V-statistic) squared MMD under a Gibbs kernel (sum over bandwidths)."""
    x, y = as_positions(x_batch), as_positions(y_batch)
    total = 0.0
    for t in spec.taus:
        total += (
            np.exp(-pairwise_sq_dists(x, x) / t).mean()
            - 2.0 * np.exp(-pairwise_sq_dists(x, y) / t).mean()
            + np.exp(-pairwise_sq_dists(y, y) / t).mean()
        )
    return float(total)


# --------------------------------------------------------------------------
# sliced Wasserstein


def random_directions(n_slices: int, d: int, rng: RngHandle) -> np.ndarray:
    """Uniform directions on the unit sphere, one RNG substream per slice."""
    dirs = np.empty((n_slices, d))
    for s in range(n_slices):
        v = rng.substream(s).generator().standard_normal(d)
        dirs[s] = v / np.linalg.norm(v)
    return dirs


def transport_1d(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Image of each ``px`` under the monotone map pushing ``px`` onto ``py``.

    Equal sizes: the r-th smallest source goes to the r-th smallest target.
    Otherwise a source of rank r sits at quantile level ``(r + 1/2)/N`` and is
    sent to the linearly interpolated target quantile at that level. Ties are
    broken by original index (stable sort).
    """
    n, m = px.shape[0], py.shape[0]
    order = np.argsort(px, kind="stable")
    py_sorted = np.sort(py, kind="stable")
    out = np.empty(n)
    if n == m:
        out[order] = py_sorted
    else:
        levels = (np.arange(n) + 0.5) / n
        knots = (np.arange(m) + 0.5) / m
        out[order] = np.interp(levels, knots, py_sorted)
    return out


def sw_drift(
    x_batch: Any,
    y_batch: Any,
    n_slices: int = 32,
    rng: RngHandle | None = None,
    directions: Any = None,
) -> np.ndarray:
    """Sliced-Wasserstein drift: mean over directions of ``(T(t.x) - t.x) t``.

    ``directions`` (L x d, unit rows) overrides random sampling.
    """
    x, y = as_positions(x_batch), as_positions(y_batch)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if directions is None:
        if n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        dirs = random_directions(n_slices, x.shape[1], rng if rng is not None else RngHandle(0))
    else:
        dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        if dirs.shape[1] != x.shape[1]:
            raise ValueError("directions must have the batch dimension")
    out = np.zeros_like(x)
    for t in dirs:
        px, py = x @ t, y @ t
        out += (transport_1d(px, py) - px)[:, None] * t[None, :]
    return out / dirs.shape[0]
