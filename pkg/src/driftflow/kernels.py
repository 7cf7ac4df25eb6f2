"""Gaussian kernels, Parzen densities and Tweedie scores.

Two conventions live here and are kept apart on purpose:

* ``parzen_gaussian``: ``(pi tau)^(-d/2) exp(-|x-y|^2 / tau)``, a probability
  density in ``x`` (the smoothing kernel of the KL drift).
* ``gibbs_gaussian``: ``exp(-|x-y|^2 / tau)``, unnormalised and equal to 1 on
  the diagonal (the kernel of the Sinkhorn proxy and of MMD).

Both use ``|x-y|^2 / tau`` in the exponent. The 1/2 cost of exact entropic OT
belongs to :mod:`driftflow.sinkhorn`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .core import ConfigError, as_positions, logsumexp, pairwise_sq_dists

PARZEN = "parzen_gaussian"
GIBBS = "gibbs_gaussian"
FAMILIES = (PARZEN, GIBBS)


class KernelSingularityError(ArithmeticError):
    """A kernel density is zero (or not finite) at a query point."""

    def __init__(self, point, detail: str = ""):
        self.point = np.asarray(point)
        msg = f"kernel density vanished at query point {self.point.tolist()}"
        super().__init__(msg + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class KernelSpec:
    family: str = GIBBS
    tau: float = 1.0
    bandwidths: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}; choose from {FAMILIES}")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.bandwidths is not None:
            bws = tuple(float(b) for b in self.bandwidths)
            if not bws or any(not (b > 0 and math.isfinite(b)) for b in bws):
                raise ConfigError(f"bandwidths must be a non-empty list of positive reals, got {self.bandwidths}")
            object.__setattr__(self, "bandwidths", bws)

    @property
    def taus(self) -> tuple[float, ...]:
        return self.bandwidths if self.bandwidths is not None else (self.tau,)

    def single(self, tau: float) -> "KernelSpec":
        return KernelSpec(self.family, tau)


def log_normalizer(family: str, tau: float, d: int) -> float:
    if family == PARZEN:
        return -0.5 * d * math.log(math.pi * tau)
    return 0.0


def log_kernel_matrix(spec: KernelSpec, a: Any, b: Any) -> np.ndarray:
    """Exact log of :func:`kernel_matrix`; multi-bandwidth sums via logsumexp."""
    pa, pb = as_positions(a), as_positions(b)
    sq = pairwise_sq_dists(pa, pb)
    d = pa.shape[1]
    logs = [-sq / t + log_normalizer(spec.family, t, d) for t in spec.taus]
    if len(logs) == 1:
        return logs[0]
    return logsumexp(np.stack(logs), axis=0)


def kernel_matrix(spec: KernelSpec, a: Any, b: Any, log_domain: bool = True) -> np.ndarray:
    """Kernel values ``k(a_i, b_j)``; a bandwidth list gives the sum of kernels.

    ``log_domain=False`` evaluates ``exp`` per bandwidth directly and exists for
    cross-checking the log path.
    """
    if log_domain:
        return np.exp(log_kernel_matrix(spec, a, b))
    pa, pb = as_positions(a), as_positions(b)
    sq = pairwise_sq_dists(pa, pb)
    d = pa.shape[1]
    out = np.zeros_like(sq)
    for t in spec.taus:
        out += math.exp(log_normalizer(spec.family, t, d)) * np.exp(-sq / t)
    return out


def _query(x: Any, d: int) -> np.ndarray:
    q = np.asarray(x, dtype=np.float64).reshape(-1)
    if q.shape[0] != d:
        raise ValueError(f"query has dimension {q.shape[0]}, support has {d}")
    return q


def log_parzen_density(spec: KernelSpec, x: Any, support: Any, weights: Sequence[float] | None = None) -> float:
    sup = as_positions(support)
    if sup.shape[0] == 0:
        raise ValueError("empty support")
    q = _query(x, sup.shape[1])
    lk = log_kernel_matrix(spec, q[None, :], sup)[0]
    if weights is None:
        return logsumexp(lk) - math.log(sup.shape[0])
    w = np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return logsumexp(lk + np.log(w))


def parzen_density(spec: KernelSpec, x: Any, support: Any, weights: Sequence[float] | None = None) -> float:
    """Kernel density ``(1/N) sum_j k(x, y_j)`` (or weighted), accumulated in log space.

    With the Gibbs family this is the unnormalised convolution ``(k * p)(x)``.
    """
    return math.exp(log_parzen_density(spec, x, support, weights))


def parzen_score(spec: KernelSpec, x: Any, support: Any, weights: Sequence[float] | None = None) -> np.ndarray:
    """Gradient of ``log parzen_density`` at ``x`` via Tweedie's formula.

    ``(2/tau) * (softmax-weighted mean of the support - x)``. The weighted
    displacement ``sum_j w_j (y_j - x)`` is formed directly instead of
    ``mean - x`` so far-away support points do not cancel against ``x``.
    """
    if len(spec.taus) != 1:
        raise ValueError("parzen_score needs a single bandwidth")
    sup = as_positions(support)
    if sup.shape[0] == 0:
        raise ValueError("empty support")
    q = _query(x, sup.shape[1])
    logits = -pairwise_sq_dists(q[None, :], sup)[0] / spec.tau
    if weights is not None:
        with np.errstate(divide="ignore"):
            logits = logits + np.log(np.asarray(weights, dtype=np.float64))
    lse = logsumexp(logits)
    if not math.isfinite(lse):
        raise KernelSingularityError(q, "log-density is -inf")
    w = np.exp(logits - lse)
    return (2.0 / spec.tau) * (w @ (sup - q))
