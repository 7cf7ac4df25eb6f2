"""KL score-difference drift (mean-shift form) and the smoothed-KL velocity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .core import RngHandle, as_positions, pairwise_sq_dists
from .kernels import PARZEN, KernelSingularityError, KernelSpec


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / np.sum(e, axis=1, keepdims=True)


def _barycenters(query: np.ndarray, support: np.ndarray, tau: float, mask_diag: bool = False) -> np.ndarray:
    logits = -pairwise_sq_dists(query, support) / tau
    if mask_diag:
        np.fill_diagonal(logits, -np.inf)
    return _softmax_rows(logits) @ support


def kl_drift(
    spec: KernelSpec,
    x_batch: Any,
    y_batch: Any,
    query: Any = None,
    ignore_self: bool = False,
) -> np.ndarray:
    """Mean-shift drift ``V_p(x) - V_q(x)`` at the model samples (or ``query``).

    Each term is a softmax-weighted barycentre; the query point itself cancels
    between attraction (data ``y``) and repulsion (model ``x``), so the result
    equals ``(tau/2) * (score_p - score_q)`` of the Gaussian Parzen estimates.

    ``ignore_self`` drops the ``k(x_i, x_i)`` term from the repulsion weights;
    it only applies when the queries are the model batch itself.
    """
    if len(spec.taus) != 1:
        raise ValueError("kl_drift uses a single bandwidth tau")
    x, y = as_positions(x_batch), as_positions(y_batch)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if query is None:
        q = x
    else:
        q = as_positions(query)
        if ignore_self:
            raise ValueError("ignore_self needs the model batch as the query set")
    if ignore_self and x.shape[0] < 2:
        raise ValueError("ignore_self needs at least two model samples")
    return _barycenters(q, y, spec.tau) - _barycenters(q, x, spec.tau, mask_diag=ignore_self)


def _score_diff(x: np.ndarray, p_support: np.ndarray, q_support: np.ndarray, tau: float) -> np.ndarray:
    """``grad log p_tau - grad log q_tau`` at rows of ``x``."""
    lp = -pairwise_sq_dists(x, p_support) / tau
    lq = -pairwise_sq_dists(x, q_support) / tau
    bad = ~np.isfinite(np.max(lp, axis=1)) | ~np.isfinite(np.max(lq, axis=1))
    if np.any(bad):
        raise KernelSingularityError(x[np.argmax(bad)])
    return (2.0 / tau) * (_softmax_rows(lp) @ p_support - _softmax_rows(lq) @ q_support)


@dataclass(frozen=True)
class SmoothedKLEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    mc_samples: int


def smoothed_kl_drift(
    spec: KernelSpec,
    x_batch: Any,
    y_batch: Any,
    query: Any = None,
    mc_samples: int = 256,
    rng: RngHandle | None = None,
) -> SmoothedKLEstimate:
    """Monte Carlo velocity of the gradient flow of ``KL(q_tau || p_tau)``.

    For the normalised Gaussian kernel, ``k_tau(., y)`` is the density of
    ``N(y, tau/2 I)``, so the velocity at ``y`` is the expectation of the
    Parzen score difference under that Gaussian. Each query row draws its
    own substream of ``rng``; the same draws are used for both scores
    (common random numbers), so equal supports give exactly zero.
    """
    if spec.family != PARZEN:
        raise ValueError("smoothed_kl_drift is defined for the parzen_gaussian kernel only")
    if len(spec.taus) != 1:
        raise ValueError("smoothed_kl_drift uses a single bandwidth tau")
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    rng = rng if rng is not None else RngHandle(0)
    x, y = as_positions(x_batch), as_positions(y_batch)
    q = x if query is None else as_positions(query)
    d = q.shape[1]
    scale = np.sqrt(spec.tau / 2.0)
    mean = np.empty_like(q)
    se = np.empty_like(q)
    for i in range(q.shape[0]):
        noise = rng.substream(i).generator().standard_normal((mc_samples, d))
        pts = q[i] + scale * noise
        try:
            vals = _score_diff(pts, y, x, spec.tau)
        except KernelSingularityError as err:
            raise KernelSingularityError(err.point, f"while estimating the drift at query row {i}") from err
        mean[i] = vals.mean(axis=0)
        se[i] = vals.std(axis=0, ddof=1) / np.sqrt(mc_samples) if mc_samples > 1 else np.inf
    return SmoothedKLEstimate(mean, se, mc_samples)
