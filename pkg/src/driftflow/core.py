"""Shared numeric primitives, the RNG contract, and the 2D toy datasets.

Dataset constants (the usual toy-generative-modelling choices):

==================  ==========================================================
name                parameterisation
==================  ==========================================================
moons               sklearn-style two interleaved half circles, shifted by
                    (-0.5, -0.25) so the pair is centred; noise 0.05
circles             two concentric circles, radii 1.0 and 0.5; noise 0.05
eight_gaussians     8 isotropic clusters on a ring of radius 2, std 0.1
pinwheel            5 arms, radial std 0.3, tangential std 0.1, rate 0.25
swiss_roll          t ~ U[1.5pi, 4.5pi], (t cos t, t sin t) / 5; noise 0.1
two_delta_mixture   1D atoms at -D (weight w) and +D (weight 1-w), jitter 0
==================  ==========================================================
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "DATASET_NAMES",
    "DatasetSpec",
    "ParticleBatch",
    "RngHandle",
    "Role",
    "as_positions",
    "atoms",
    "logsumexp",
    "pairwise_sq_dists",
    "read_batch_csv",
    "sample_dataset",
    "write_batch_csv",
]

_U64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Invalid user-facing configuration (unknown names, bad ranges)."""


class Role(str, enum.Enum):
    MODEL = "model"
    DATA = "data"


class ParticleBatch:
    """An immutable N x d array of particle positions tagged with its role."""

    __slots__ = ("_positions", "_role", "_seed")

    def __init__(self, positions: Any, role: Role | str = Role.MODEL, seed_provenance: int = 0):
        pos = np.array(positions, dtype=np.float64)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim != 2 or pos.shape[0] < 1 or pos.shape[1] < 1:
            raise ValueError(f"positions must be a non-empty N x d array, got shape {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain NaN or Inf")
        pos.setflags(write=False)
        self._positions = pos
        self._role = Role(role)
        self._seed = int(seed_provenance) & _U64

    @property
    def positions(self) -> np.ndarray:
        return self._positions

    @property
    def role(self) -> Role:
        return self._role

    @property
    def seed_provenance(self) -> int:
        return self._seed

    @property
    def n(self) -> int:
        return self._positions.shape[0]

    @property
    def d(self) -> int:
        return self._positions.shape[1]

    def __len__(self) -> int:
        return self.n

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._positions
        return self._positions.astype(dtype)

    def with_positions(self, positions: Any) -> "ParticleBatch":
        return ParticleBatch(positions, self._role, self._seed)

    def __repr__(self) -> str:
        return f"ParticleBatch(n={self.n}, d={self.d}, role={self._role.value})"


def as_positions(batch: Any) -> np.ndarray:
    """Return a 2D float64 view of a ParticleBatch or array-like."""
    if isinstance(batch, ParticleBatch):
        return batch.positions
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected an N x d array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class RngHandle:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Draws come from a Philox generator keyed by both numbers, so two handles
    with equal fields produce bit-identical sequences, and ``substream`` gives
    independent children without consuming draws from the parent.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _U64 and 0 <= self.stream_id <= _U64):
            raise ValueError("seed and stream_id must be 64-bit unsigned integers")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))

    def substream(self, index: int) -> "RngHandle":
        mixed = np.random.SeedSequence(entropy=[self.stream_id, int(index)], pool_size=4)
        child = int(mixed.generate_state(1, dtype=np.uint64)[0])
        return RngHandle(self.seed, child)


def pairwise_sq_dists(a: Any, b: Any) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``a`` and ``b``."""
    pa, pb = as_positions(a), as_positions(b)
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    diff = pa[:, None, :] - pb[None, :, :]
    # explicit differences (not the |a|^2+|b|^2-2ab expansion) keep entries >= 0
    # and the diagonal of a batch against itself exactly zero
    return np.einsum("ijk,ijk->ij", diff, diff)


def logsumexp(values: Any, axis: int | None = None) -> Any:
    """Max-shifted log-sum-exp. Accepts -inf entries; rejects empty input."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty input")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


# --------------------------------------------------------------------------
# datasets

DATASET_NAMES = ("moons", "circles", "eight_gaussians", "pinwheel", "swiss_roll", "two_delta_mixture")

_DEFAULT_NOISE = {
    "moons": 0.05,
    "circles": 0.05,
    "eight_gaussians": 0.1,
    "pinwheel": 0.1,
    "swiss_roll": 0.1,
    "two_delta_mixture": 0.0,
}

EIGHT_GAUSSIANS_RADIUS = 2.0
PINWHEEL = {"arms": 5, "radial_std": 0.3, "rate": 0.25}


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    noise_scale: float | None = None
    extra: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"unknown dataset {self.name!r}; choose from {', '.join(DATASET_NAMES)}")
        if self.noise_scale is not None and self.noise_scale < 0:
            raise ConfigError("noise_scale must be nonnegative")

    @property
    def noise(self) -> float:
        if self.noise_scale is not None:
            return float(self.noise_scale)
        if self.name == "two_delta_mixture":
            return float(self.extra.get("jitter", 0.0))
        return _DEFAULT_NOISE[self.name]

    def describe(self) -> dict:
        """Resolved constants, for run manifests."""
        out = {"name": self.name, "noise_scale": self.noise}
        if self.name == "eight_gaussians":
            out["radius"] = EIGHT_GAUSSIANS_RADIUS
        elif self.name == "pinwheel":
            out.update(PINWHEEL)
        elif self.name == "circles":
            out["radii"] = [1.0, 0.5]
        elif self.name == "two_delta_mixture":
            out["D"] = float(self.extra.get("D", 1.0))
            out["weight"] = float(self.extra.get("weight", 0.5))
        return out


def _moons(n, gen, noise):
    n_out = n // 2 + n % 2
    t = gen.uniform(0.0, np.pi, size=n)
    outer = np.arange(n) < n_out
    x = np.where(outer, np.cos(t), 1.0 - np.cos(t))
    y = np.where(outer, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([x - 0.5, y - 0.25], axis=1)
    return pts + noise * gen.standard_normal((n, 2))


def _circles(n, gen, noise):
    t = gen.uniform(0.0, 2 * np.pi, size=n)
    r = np.where(gen.random(n) < 0.5, 1.0, 0.5)
    pts = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    return pts + noise * gen.standard_normal((n, 2))


def eight_gaussian_centers() -> np.ndarray:
    ang = np.arange(8) * (np.pi / 4)
    return EIGHT_GAUSSIANS_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _eight_gaussians(n, gen, noise):
    idx = gen.integers(0, 8, size=n)
    return eight_gaussian_centers()[idx] + noise * gen.standard_normal((n, 2))


def _pinwheel(n, gen, noise):
    arms, radial_std, rate = PINWHEEL["arms"], PINWHEEL["radial_std"], PINWHEEL["rate"]
    labels = gen.integers(0, arms, size=n)
    feats = gen.standard_normal((n, 2)) * np.array([radial_std, noise])
    feats[:, 0] += 1.0
    angles = labels * (2 * np.pi / arms) + rate * np.exp(feats[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    return np.stack([c * feats[:, 0] - s * feats[:, 1], s * feats[:, 0] + c * feats[:, 1]], axis=1)


def _swiss_roll(n, gen, noise):
    t = 1.5 * np.pi * (1.0 + 2.0 * gen.random(n))
    pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / 5.0
    return pts + noise * gen.standard_normal((n, 2))


def _two_delta(n, gen, noise, extra):
    D = float(extra.get("D", 1.0))
    w = float(extra.get("weight", 0.5))
    if D <= 0 or not 0.0 <= w <= 1.0:
        raise ConfigError("two_delta_mixture needs D > 0 and weight in [0, 1]")
    left = gen.random(n) < w
    pts = np.where(left, -D, D)[:, None].astype(np.float64)
    if noise > 0:
        pts = pts + noise * gen.standard_normal((n, 1))
    return pts


def sample_dataset(spec: DatasetSpec, n: int, rng: RngHandle) -> ParticleBatch:
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = rng.generator()
    noise = spec.noise
    if spec.name == "moons":
        pts = _moons(n, gen, noise)
    elif spec.name == "circles":
        pts = _circles(n, gen, noise)
    elif spec.name == "eight_gaussians":
        pts = _eight_gaussians(n, gen, noise)
    elif spec.name == "pinwheel":
        pts = _pinwheel(n, gen, noise)
    elif spec.name == "swiss_roll":
        pts = _swiss_roll(n, gen, noise)
    else:
        pts = _two_delta(n, gen, noise, spec.extra)
    return ParticleBatch(pts, Role.DATA, seed_provenance=rng.seed)


# --------------------------------------------------------------------------
# CSV round trip


def write_batch_csv(path: str | Path, batch: Any) -> None:
    pos = as_positions(batch)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(pos.shape[1])])
        for row in pos:
            w.writerow([repr(float(v)) for v in row])


def read_batch_csv(path: str | Path, role: Role | str = Role.DATA) -> ParticleBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or any(h != f"x{k}" for k, h in enumerate(header)):
        raise ValueError(f"{path}: expected header x0,x1,..., got {header}")
    return ParticleBatch([[float(v) for v in r] for r in body], role)


def atoms(positions: Sequence, weights: Sequence[float] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted atoms ``(positions, weights)`` with weights normalised to 1."""
    pos = as_positions(positions)
    if weights is None:
        w = np.full(pos.shape[0], 1.0 / pos.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (pos.shape[0],) or np.any(w < 0) or not math.isfinite(w.sum()) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive total, one per atom")
        w = w / w.sum()
    return pos, w
