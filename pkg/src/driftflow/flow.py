"""Euler particle flows for any drift kind, and the two-atom failure-mode table."""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .core import ConfigError, ParticleBatch, RngHandle, Role, as_positions
from .drifts import DriftConfig, compute_drift
from .evaluate import median_bandwidth
from .kernels import GIBBS, KernelSpec, parzen_score
from .mmd_sw import mmd2
from .sinkhorn import population_proxy_drift

METRIC_COLUMNS = ("step", "energy_mmd2", "mean_drift_norm", "max_drift_norm", "diverged")


class FlowError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"drift failed at step {step}: {cause}")


@dataclass(frozen=True)
class FlowConfig:
    drift: DriftConfig = field(default_factory=DriftConfig)
    step_size: float = 0.1
    n_steps: int = 100
    snapshot_every: int = 10
    seed: int = 0
    resample_target: bool = True
    energy_bandwidths: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError("step size eta must be positive")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be >= 1")


@dataclass(frozen=True)
class FlowRecord:
    step: int
    energy_mmd2: float
    mean_drift_norm: float
    max_drift_norm: float
    diverged: bool = False

    def row(self) -> list:
        return [self.step, repr(self.energy_mmd2), repr(self.mean_drift_norm), repr(self.max_drift_norm), int(self.diverged)]


@dataclass
class FlowResult:
    final: ParticleBatch
    records: list[FlowRecord]
    snapshots: list[tuple[int, np.ndarray]]
    energy_kernel: KernelSpec

    @property
    def diverged(self) -> bool:
        return bool(self.records) and self.records[-1].diverged


def energy_kernel_for(cfg: FlowConfig, init: np.ndarray, target: np.ndarray) -> KernelSpec:
    """Kernel of the logged MMD^2 energy.

    Explicit ``energy_bandwidths`` win; an MMD flow uses its own kernel (so the
    log is its true energy); every other kind uses a Gibbs kernel whose
    bandwidth is the pooled median squared distance at step 0, frozen for the
    run.
    """
    if cfg.energy_bandwidths is not None:
        return KernelSpec(GIBBS, 1.0, cfg.energy_bandwidths)
    if cfg.drift.kind == "mmd":
        return cfg.drift.kernel()
    return KernelSpec(GIBBS, median_bandwidth(np.concatenate([init, target])))


def run_flow(
    cfg: FlowConfig,
    init: Any,
    target: Any,
    target_sampler: Callable[[int, RngHandle], Any] | None = None,
) -> FlowResult:
    """Integrate ``x <- x + eta * V(x)`` for ``n_steps`` Euler steps.

    Step ``s`` evaluates the drift against the fixed ``target`` batch, or,
    when ``cfg.resample_target`` is set and a sampler is given, against a fresh
    batch of the same size. Energy is always measured against ``target``.
    One record per step (step 0 included); a snapshot every
    ``snapshot_every`` steps and at the end. Non-finite positions stop the run
    with a flagged record.
    """
    x = np.array(as_positions(init), dtype=np.float64)
    y_ref = as_positions(target)
    if x.shape[1] != y_ref.shape[1]:
        raise ValueError(f"init has dimension {x.shape[1]}, target has {y_ref.shape[1]}")
    root = RngHandle(cfg.seed)
    drift_rng, data_rng = root.substream(1), root.substream(2)
    kernel = energy_kernel_for(cfg, x, y_ref)
    records: list[FlowRecord] = []
    snapshots: list[tuple[int, np.ndarray]] = []
    resample = cfg.resample_target and target_sampler is not None
    for step in range(cfg.n_steps + 1):
        y = as_positions(target_sampler(y_ref.shape[0], data_rng.substream(step))) if resample else y_ref
        try:
            v = compute_drift(cfg.drift, x, y, drift_rng.substream(step))
        except Exception as err:  # noqa: BLE001 - re-raised with the step attached
            raise FlowError(step, err) from err
        norms = np.linalg.norm(v, axis=1)
        energy = mmd2(kernel, x, y_ref)
        finite = bool(np.all(np.isfinite(v)) and math.isfinite(energy))
        records.append(FlowRecord(step, energy, float(norms.mean()), float(norms.max()), not finite))
        if step % cfg.snapshot_every == 0 or step == cfg.n_steps:
            snapshots.append((step, x.copy()))
        if not finite or step == cfg.n_steps:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + cfg.step_size * v
        if not np.all(np.isfinite(x)):
            records.append(FlowRecord(step + 1, math.nan, math.nan, math.nan, True))
            break
    final = ParticleBatch(x, Role.MODEL) if np.all(np.isfinite(x)) else ParticleBatch(snapshots[-1][1], Role.MODEL)
    return FlowResult(final, records, snapshots, kernel)


def write_metrics_csv(path: str | Path, records: Sequence[FlowRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow(r.row())


# --------------------------------------------------------------------------
# two point masses

TWO_DELTA_COLUMNS = ("tau", "eps", "v_kl", "v_sp", "ratio", "v_w2", "underflow")
_LOG_TINY = math.log(sys.float_info.min)


@dataclass(frozen=True)
class TwoDeltaRow:
    tau: float
    eps: float
    log_eps: float
    v_kl: float
    v_sp: float
    ratio: float
    v_w2: float
    underflow: bool = False

    def row(self) -> list:
        return [repr(self.tau), repr(self.eps), repr(self.v_kl), repr(self.v_sp), repr(self.ratio), repr(self.v_w2), int(self.underflow)]


def w2_barycentric_velocity(D: float, alpha: float, beta: float) -> float:
    """Velocity at +D of the W2 flow: the mean OT destination minus D."""
    return -2.0 * D * (alpha - beta) / (1.0 - beta)


def two_delta_row(D: float, alpha: float, beta: float, tau: float) -> TwoDeltaRow:
    log_eps = -4.0 * D * D / tau
    v_w2 = w2_barycentric_velocity(D, alpha, beta)
    if log_eps < _LOG_TINY:
        nan = math.nan
        return TwoDeltaRow(tau, 0.0, log_eps, nan, nan, nan, v_w2, underflow=True)
    at = np.array([[-D], [D]])
    p_w = np.array([alpha, 1.0 - alpha])
    q_w = np.array([beta, 1.0 - beta])
    x = np.array([D])
    # log-space Tweedie scores; the atom at +D contributes an exact zero displacement,
    # so nothing cancels and eps down to ~1e-300 survives
    k = KernelSpec(GIBBS, tau)
    v_kl = float(0.5 * tau * (parzen_score(k, x, at, p_w) - parzen_score(k, x, at, q_w))[0])
    v_sp = float(population_proxy_drift(x, (at, p_w), (at, q_w), tau)[0][0])
    ratio = v_sp / v_kl if v_kl != 0.0 else math.nan
    return TwoDeltaRow(tau, math.exp(log_eps), log_eps, v_kl, v_sp, ratio, v_w2)


def two_delta_experiment(D: float, alpha: float, beta: float, tau_grid: Sequence[float]) -> list[TwoDeltaRow]:
    """Exact population drifts at ``x = +D`` for ``p = a d_{-D} + (1-a) d_{+D}``
    and ``q = b d_{-D} + (1-b) d_{+D}`` over a grid of kernel widths."""
    if not D > 0:
        raise ValueError("D must be positive")
    if not (0 < alpha < 1 and 0 < beta < 1):
        raise ValueError("alpha and beta must lie in (0, 1)")
    if beta > alpha:
        raise ValueError("expected beta <= alpha (model starved at -D)")
    return [two_delta_row(D, alpha, beta, float(t)) for t in tau_grid]


def write_two_delta_csv(path: str | Path, rows: Sequence[TwoDeltaRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TWO_DELTA_COLUMNS)
        for r in rows:
            w.writerow(r.row())
