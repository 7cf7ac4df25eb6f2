"""Entropic OT in log space, the exact debiased-Sinkhorn drift, and the
one-shot Sinkhorn proxy drift.

Conventions: ``sinkhorn_solve`` uses the cost ``C = 1/2 |x-y|^2`` by default
(the cost under which the exact drift is the Wasserstein gradient of the
debiased divergence). The proxy works with affinities ``-|x-y|^2 / tau``; the
factor 2 between the two is left to the step size.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .core import ConfigError, as_positions, logsumexp, pairwise_sq_dists
from .kernels import KernelSingularityError

HALF_SQ = "half_sq"
SQ = "sq"


class SinkhornConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    tau: float = 1.0
    max_iters: int = 100
    marginal_tol: float = 1e-9
    cost_convention: str = HALF_SQ

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if not self.marginal_tol > 0:
            raise ConfigError("marginal_tol must be positive")
        if self.cost_convention not in (HALF_SQ, SQ):
            raise ConfigError(f"cost_convention must be {HALF_SQ!r} or {SQ!r}")

    def cost(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        sq = pairwise_sq_dists(x, y)
        return 0.5 * sq if self.cost_convention == HALF_SQ else sq


@dataclass
class TransportPlan:
    """Joint coupling in log space plus convergence diagnostics.

    Marginal errors are relative: ``max_i |N_rows * sum_j P_ij - 1|`` and the
    column analogue, i.e. deviations of the conditional plans from unit sums.
    """

    log_plan: np.ndarray
    row_marginal_err: float
    col_marginal_err: float
    iterations_used: int
    converged: bool
    f: np.ndarray | None = None
    g: np.ndarray | None = None
    err_history: list[tuple[float, float]] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_plan.shape

    def conditional(self) -> np.ndarray:
        """Row-stochastic conditional plan ``W = N_rows * P``."""
        return np.exp(self.log_plan + math.log(self.log_plan.shape[0]))

    def dual_value(self) -> float:
        """Entropic OT value ``<a, f> + <b, g>`` (valid when the plan has unit mass)."""
        if self.f is None or self.g is None:
            raise ValueError("plan carries no potentials")
        return float(np.mean(self.f) + np.mean(self.g))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "log_weight"])
            n, m = self.log_plan.shape
            for i in range(n):
                for j in range(m):
                    w.writerow([i, j, repr(float(self.log_plan[i, j]))])


def _marginal_errors(log_plan: np.ndarray) -> tuple[float, float]:
    n, m = log_plan.shape
    rows = np.exp(logsumexp(log_plan, axis=1) + math.log(n))
    cols = np.exp(logsumexp(log_plan, axis=0) + math.log(m))
    return float(np.max(np.abs(rows - 1.0))), float(np.max(np.abs(cols - 1.0)))


def sinkhorn_from_cost(cost: np.ndarray, tau: float, max_iters: int = 100, marginal_tol: float = 1e-9) -> TransportPlan:
    """Alternating log-domain potential updates for uniform marginals.

    Potentials start at zero. Each iteration updates the row potential ``f``
    (making the rows exact) and stops once the column error is within
    ``marginal_tol``; otherwise it updates the column potential ``g``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or 0 in cost.shape:
        raise ValueError("cost must be a non-empty matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape
    log_a, log_b = -math.log(n), -math.log(m)
    g = np.zeros(m)
    scaled = -cost / tau
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        f = -tau * logsumexp(log_b + g[None, :] / tau + scaled, axis=1)
        log_plan = log_a + log_b + (f[:, None] + g[None, :]) / tau + scaled
        row_err, col_err = _marginal_errors(log_plan)
        history.append((row_err, col_err))
        if max(row_err, col_err) <= marginal_tol:
            converged = True
            break
        g = -tau * logsumexp(log_a + f[:, None] / tau + scaled, axis=0)
    return TransportPlan(log_plan, row_err, col_err, it, converged, f, g, history)


def sinkhorn_solve(cfg: SinkhornConfig, x_batch: Any, y_batch: Any) -> TransportPlan:
    x, y = as_positions(x_batch), as_positions(y_batch)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    return sinkhorn_from_cost(cfg.cost(x, y), cfg.tau, cfg.max_iters, cfg.marginal_tol)


def debiased_sinkhorn_divergence(cfg: SinkhornConfig, x_batch: Any, y_batch: Any) -> float:
    """``S = OT(q,p) - OT(q,q)/2 - OT(p,p)/2`` for the two empirical measures."""
    x, y = as_positions(x_batch), as_positions(y_batch)
    return (
        sinkhorn_solve(cfg, x, y).dual_value()
        - 0.5 * sinkhorn_solve(cfg, x, x).dual_value()
        - 0.5 * sinkhorn_solve(cfg, y, y).dual_value()
    )


def sinkhorn_exact_drift(cfg: SinkhornConfig, x_batch: Any, y_batch: Any, strict: bool = True) -> np.ndarray:
    """Wasserstein-gradient velocity of the debiased Sinkhorn divergence.

    ``sum_j W+_ij y_j - sum_k W-_ik x_k`` with conditional plans of
    ``OT(q, p)`` and ``OT(q, q)``. Under the ``sq`` cost the gradient of the
    cost doubles, and so does the velocity. With ``strict`` a plan that missed
    the marginal tolerance raises; otherwise the drift is computed anyway.
    """
    x, y = as_positions(x_batch), as_positions(y_batch)
    plus = sinkhorn_solve(cfg, x, y)
    minus = sinkhorn_solve(cfg, x, x)
    if strict:
        for name, plan in (("q-p", plus), ("q-q", minus)):
            if not plan.converged:
                raise SinkhornConvergenceError(
                    f"{name} plan not converged after {plan.iterations_used} iterations "
                    f"(row err {plan.row_marginal_err:.3g}, col err {plan.col_marginal_err:.3g})"
                )
    v = plus.conditional() @ y - minus.conditional() @ x
    return 2.0 * v if cfg.cost_convention == SQ else v


def _extended_barycenter(cfg: SinkhornConfig, query: np.ndarray, support: np.ndarray, g: np.ndarray) -> np.ndarray:
    logits = (g[None, :] - cfg.cost(query, support)) / cfg.tau
    w = np.exp(logits - logsumexp(logits, axis=1)[:, None])
    return w @ support


def sinkhorn_exact_field(cfg: SinkhornConfig, query: Any, x_batch: Any, y_batch: Any) -> np.ndarray:
    """The exact drift as a field on space: minus the gradient of the
    extended potential ``f_qp - f_qq`` at arbitrary query points.

    The batches fix the column potentials; each query row is then softly
    assigned by ``softmax_j((g_j - C(z, y_j)) / tau)``. At the model samples
    this reproduces :func:`sinkhorn_exact_drift` up to solver tolerance.
    """
    x, y, q = as_positions(x_batch), as_positions(y_batch), as_positions(query)
    plus = sinkhorn_solve(cfg, x, y)
    minus = sinkhorn_solve(cfg, x, x)
    v = _extended_barycenter(cfg, q, y, plus.g) - _extended_barycenter(cfg, q, x, minus.g)
    return 2.0 * v if cfg.cost_convention == SQ else v


# --------------------------------------------------------------------------
# one-shot proxy

OURS = "ours"
DA2 = "da2"


@dataclass
class ProxyTerms:
    """Intermediate quantities of the proxy, all row-indexed by model samples."""

    log_a_plus: np.ndarray
    log_a_minus: np.ndarray
    s_plus: np.ndarray
    s_minus: np.ndarray
    drift: np.ndarray

    @property
    def Z(self) -> np.ndarray:
        return self.s_plus * self.s_minus


def _geometric_mean_normalise(z: np.ndarray) -> np.ndarray:
    """log of ``sqrt(softmax_row(z) * softmax_col(z))``."""
    return z - 0.5 * logsumexp(z, axis=1)[:, None] - 0.5 * logsumexp(z, axis=0)[None, :]


def sinkhorn_proxy_terms(
    tau: float,
    x_batch: Any,
    y_batch: Any,
    variant: str = OURS,
    ignore_self: bool = False,
    population_scaling: bool = False,
) -> ProxyTerms:
    x, y = as_positions(x_batch), as_positions(y_batch)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if variant not in (OURS, DA2):
        raise ConfigError(f"unknown proxy variant {variant!r}; choose {OURS!r} or {DA2!r}")
    n_minus, n_plus = x.shape[0], y.shape[0]
    z_plus = -pairwise_sq_dists(x, y) / tau
    z_minus = -pairwise_sq_dists(x, x) / tau
    if ignore_self:
        if n_minus < 2:
            raise ValueError("ignore_self needs at least two model samples")
        np.fill_diagonal(z_minus, -np.inf)
    if variant == OURS:
        log_ap = _geometric_mean_normalise(z_plus)
        log_am = _geometric_mean_normalise(z_minus)
    else:
        log_a = _geometric_mean_normalise(np.concatenate([z_plus, z_minus], axis=1))
        log_ap, log_am = log_a[:, :n_plus], log_a[:, n_plus:]
    a_plus, a_minus = np.exp(log_ap), np.exp(log_am)
    s_plus = a_plus.sum(axis=1)
    s_minus = a_minus.sum(axis=1)
    # cross-weighting: attraction scaled by the repulsion row sum and vice versa
    drift = s_minus[:, None] * (a_plus @ y) - s_plus[:, None] * (a_minus @ x)
    if population_scaling:
        drift = drift * math.sqrt(n_minus / n_plus)
    return ProxyTerms(log_ap, log_am, s_plus, s_minus, drift)


def sinkhorn_proxy_drift(
    tau: float,
    x_batch: Any,
    y_batch: Any,
    variant: str = OURS,
    ignore_self: bool = False,
    population_scaling: bool = False,
) -> np.ndarray:
    """One-shot Sinkhorn proxy drift at each model sample.

    ``variant="ours"`` normalises the data and model affinities separately;
    ``"da2"`` concatenates them for the row softmax and splits afterwards.
    Batch-size factors are dropped, as in the reference algorithm; pass
    ``population_scaling=True`` to restore them (a common factor
    ``sqrt(N-/N+)``), which makes the estimator converge to
    :func:`population_proxy_drift`.
    """
    return sinkhorn_proxy_terms(tau, x_batch, y_batch, variant, ignore_self, population_scaling).drift


@dataclass(frozen=True)
class PopulationProxy:
    drift: np.ndarray
    Z: float
    potential: float


def population_proxy(x: Any, p_atoms: tuple, q_atoms: tuple, tau: float) -> PopulationProxy:
    """Population Sinkhorn-proxy field at ``x`` for weighted atomic measures.

    ``p_atoms`` and ``q_atoms`` are ``(positions, weights)`` pairs (see
    :func:`driftflow.core.atoms`). The data atoms are reweighted by
    ``q_tau^(-1/2)`` and so are the model atoms; the drift is
    ``Z(x) * (bary_p~(x) - bary_q~(x))`` with ``Z = s+ s-``. ``potential`` is
    ``(tau/2) (log(k*p~) - log(k*q~))(x)``, whose gradient times ``Z`` is the
    drift.
    """
    yp, wp = as_positions(p_atoms[0]), np.asarray(p_atoms[1], dtype=np.float64)
    xq, wq = as_positions(q_atoms[0]), np.asarray(q_atoms[1], dtype=np.float64)
    q = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if not (q.shape[1] == yp.shape[1] == xq.shape[1]):
        raise ValueError("query and atoms must share dimension")
    with np.errstate(divide="ignore"):
        lwp, lwq = np.log(wp), np.log(wq)

    def log_conv(points, log_w):
        return logsumexp(log_w[None, :] - pairwise_sq_dists(points, xq) / tau, axis=1)

    log_qt_at_p = log_conv(yp, lwq)
    log_qt_at_q = log_conv(xq, lwq)
    if not (np.all(np.isfinite(log_qt_at_p[wp > 0])) and np.all(np.isfinite(log_qt_at_q[wq > 0]))):
        raise KernelSingularityError(q[0], "smoothed model density vanished at an atom")
    log_pt_x = logsumexp(lwp - pairwise_sq_dists(q, yp)[0] / tau)
    log_qt_x = logsumexp(lwq - pairwise_sq_dists(q, xq)[0] / tau)
    logit_p = lwp - 0.5 * log_qt_at_p - pairwise_sq_dists(q, yp)[0] / tau
    logit_q = lwq - 0.5 * log_qt_at_q - pairwise_sq_dists(q, xq)[0] / tau
    lse_p, lse_q = logsumexp(logit_p), logsumexp(logit_q)
    if not (math.isfinite(lse_p) and math.isfinite(lse_q) and math.isfinite(log_pt_x)):
        raise KernelSingularityError(q[0])
    log_Z = (lse_p - 0.5 * log_pt_x) + (lse_q - 0.5 * log_qt_x)
    disp_p = np.exp(logit_p - lse_p) @ (yp - q[0])
    disp_q = np.exp(logit_q - lse_q) @ (xq - q[0])
    Z = math.exp(log_Z)
    return PopulationProxy(Z * (disp_p - disp_q), Z, 0.5 * tau * (lse_p - lse_q))


def population_proxy_drift(x: Any, p_atoms: tuple, q_atoms: tuple, tau: float) -> tuple[np.ndarray, float]:
    """``(drift, Z)`` of the population Sinkhorn proxy at ``x``."""
    res = population_proxy(x, p_atoms, q_atoms, tau)
    return res.drift, res.Z


# --------------------------------------------------------------------------
# symmetric (geometric-mean) normalisation


def iterate_symmetric_normalization(K: Any, iters: int) -> TransportPlan:
    """Repeat ``A <- D_r^(-1/2) A D_c^(-1/2)`` on a positive square matrix.

    Returns the result as a joint plan (total mass 1) so it is directly
    comparable with :func:`sinkhorn_solve`; ``err_history`` holds the
    relative (row, column) marginal errors after every iteration.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {K.shape}")
    if not np.all(K > 0) or not np.all(np.isfinite(K)):
        raise ValueError("matrix entries must be strictly positive and finite")
    n = K.shape[0]
    log_a = np.log(K)
    history = []
    row_err = col_err = float("inf")
    for _ in range(iters):
        log_a = _geometric_mean_normalise(log_a)
        row_err, col_err = _marginal_errors(log_a - math.log(n))
        history.append((row_err, col_err))
    log_plan = log_a - math.log(n)
    if not history:
        row_err, col_err = _marginal_errors(log_plan)
    return TransportPlan(log_plan, row_err, col_err, iters, False, err_history=history)
