"""Drift fields, particle flows and drifted-target generator training."""

__version__ = "0.1.0"

from .core import ConfigError, DatasetSpec, ParticleBatch, RngHandle, Role, sample_dataset
from .drifts import DRIFT_KINDS, DriftConfig, compute_drift
from .evaluate import mmd2_median
from .flow import FlowConfig, run_flow, two_delta_experiment
from .generator import Architecture, GeneratorModel, TrainConfig, train
from .kernels import KernelSpec
from .sinkhorn import SinkhornConfig, sinkhorn_solve
from .verify import run_verification_suite

__all__ = [
    "Architecture",
    "ConfigError",
    "DRIFT_KINDS",
    "DatasetSpec",
    "DriftConfig",
    "FlowConfig",
    "GeneratorModel",
    "KernelSpec",
    "ParticleBatch",
    "RngHandle",
    "Role",
    "SinkhornConfig",
    "TrainConfig",
    "compute_drift",
    "mmd2_median",
    "run_flow",
    "sample_dataset",
    "sinkhorn_solve",
    "train",
    "two_delta_experiment",
]
