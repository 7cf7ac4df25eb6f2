"""One entry point for every velocity field, selected by drift kind."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from .core import ConfigError, RngHandle, as_positions
from .drift_kl import kl_drift, smoothed_kl_drift
from .kernels import GIBBS, PARZEN, KernelSpec
from .mmd_sw import mmd_drift, sw_drift
from .sinkhorn import DA2, OURS, SinkhornConfig, sinkhorn_exact_drift, sinkhorn_proxy_drift

DRIFT_KINDS = ("kl", "smoothed_kl", "sinkhorn_exact", "sinkhorn_proxy", "sinkhorn_proxy_da2", "mmd", "sw")


def normalize_kind(name: str, variant: str | None = None) -> str:
    """Map user spellings (``sinkhorn-proxy`` + ``--variant da2``) onto a kind."""
    kind = name.strip().lower().replace("-", "_")
    if kind == "sinkhorn_proxy" and variant is not None:
        if variant not in (OURS, DA2):
            raise ConfigError(f"unknown proxy variant {variant!r}; choose {OURS!r} or {DA2!r}")
        kind = "sinkhorn_proxy_da2" if variant == DA2 else kind
    if kind not in DRIFT_KINDS:
        raise ConfigError(f"unknown drift kind {name!r}; choose from {', '.join(DRIFT_KINDS)}")
    return kind


@dataclass(frozen=True)
class DriftConfig:
    """Drift kind plus the hyperparameters any kind may need.

    ``tau`` is the kernel bandwidth (kl, smoothed_kl, mmd) or the entropic
    regularisation (Sinkhorn kinds). ``bandwidths`` turns the MMD kernel into
    a sum over bandwidths. ``sinkhorn_strict`` makes the exact Sinkhorn drift
    raise on an unconverged plan; flows and training default to reporting.
    """

    kind: str = "mmd"
    tau: float = 0.5
    bandwidths: tuple[float, ...] | None = None
    ignore_self: bool = False
    n_slices: int = 32
    mc_samples: int = 256
    sinkhorn_max_iters: int = 100
    sinkhorn_tol: float = 1e-9
    sinkhorn_strict: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.bandwidths is not None:
            object.__setattr__(self, "bandwidths", tuple(float(b) for b in self.bandwidths))
        if self.n_slices < 1 or self.mc_samples < 1:
            raise ConfigError("n_slices and mc_samples must be >= 1")
        self.kernel()  # validates bandwidths

    def kernel(self) -> KernelSpec:
        if self.kind in ("kl", "smoothed_kl"):
            return KernelSpec(PARZEN, self.tau)
        return KernelSpec(GIBBS, self.tau, self.bandwidths if self.kind == "mmd" else None)

    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(self.tau, self.sinkhorn_max_iters, self.sinkhorn_tol)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bandwidths"] = list(self.bandwidths) if self.bandwidths is not None else None
        return out


def compute_drift(cfg: DriftConfig, x_batch: Any, y_batch: Any, rng: RngHandle | None = None) -> np.ndarray:
    """Velocity at every model sample ``x_i`` given model and data batches."""
    x, y = as_positions(x_batch), as_positions(y_batch)
    kind = cfg.kind
    if kind == "kl":
        return kl_drift(cfg.kernel(), x, y, ignore_self=cfg.ignore_self)
    if kind == "smoothed_kl":
        return smoothed_kl_drift(cfg.kernel(), x, y, mc_samples=cfg.mc_samples, rng=rng).mean
    if kind == "sinkhorn_exact":
        return sinkhorn_exact_drift(cfg.sinkhorn(), x, y, strict=cfg.sinkhorn_strict)
    if kind == "sinkhorn_proxy":
        return sinkhorn_proxy_drift(cfg.tau, x, y, OURS, ignore_self=cfg.ignore_self)
    if kind == "sinkhorn_proxy_da2":
        return sinkhorn_proxy_drift(cfg.tau, x, y, DA2, ignore_self=cfg.ignore_self)
    if kind == "mmd":
        return mmd_drift(cfg.kernel(), x, y)
    return sw_drift(x, y, cfg.n_slices, rng if rng is not None else RngHandle(0))
