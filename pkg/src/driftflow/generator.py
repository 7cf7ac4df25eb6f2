"""Residual-MLP generator with hand-written backprop, Adam, and drifted-target
training (regress generator outputs onto detached targets ``x + eta * V(x)``)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from .core import ConfigError, ParticleBatch, RngHandle, Role, as_positions
from .drifts import DriftConfig, compute_drift
from .evaluate import mmd2_median

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class Architecture:
    """``in_dim -> hidden -> n_blocks residual blocks -> out_dim``.

    ``hidden=0`` (with ``n_blocks=0``) is a single linear layer.
    """

    in_dim: int = 2
    hidden: int = 128
    n_blocks: int = 2
    out_dim: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or self.hidden < 0 or self.n_blocks < 0:
            raise ConfigError("layer widths must be positive")
        if self.hidden == 0 and self.n_blocks:
            raise ConfigError("residual blocks need hidden > 0")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden
        if h == 0:
            return {"out.W": (self.out_dim, self.in_dim), "out.b": (self.out_dim,)}
        out = {"in.W": (h, self.in_dim), "in.b": (h,)}
        for k in range(self.n_blocks):
            out.update({f"block{k}.W1": (h, h), f"block{k}.b1": (h,), f"block{k}.W2": (h, h), f"block{k}.b2": (h,)})
        out.update({"out.W": (self.out_dim, h), "out.b": (self.out_dim,)})
        return out


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(z.dtype)


@dataclass
class GeneratorModel:
    arch: Architecture
    params: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.arch.shapes()
        if set(shapes) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match architecture")
        for name, shp in shapes.items():
            self.params[name] = np.asarray(self.params[name], dtype=np.float64)
            if self.params[name].shape != shp:
                raise ValueError(f"{name}: expected shape {shp}, got {self.params[name].shape}")

    @classmethod
    def init(cls, arch: Architecture, rng: RngHandle, zero_output: bool = False) -> "GeneratorModel":
        """Uniform(+-1/sqrt(fan_in)) initialisation, biases included."""
        gen = rng.generator()
        shapes = arch.shapes()
        params = {}
        for name, shp in shapes.items():
            layer, kind = name.rsplit(".", 1)
            # a bias shares the fan-in of its weight: "b1" -> "W1", "b" -> "W"
            fan_in = shapes[f"{layer}.W{kind[1:]}" if kind.startswith("b") else name][1]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = gen.uniform(-bound, bound, size=shp)
        if zero_output:
            params["out.W"] = np.zeros_like(params["out.W"])
            params["out.b"] = np.zeros_like(params["out.b"])
        return cls(arch, params)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "GeneratorModel":
        return GeneratorModel(self.arch, {k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.arch.shapes()])

    def with_flat(self, theta: np.ndarray) -> "GeneratorModel":
        out, pos = {}, 0
        for name, shp in self.arch.shapes().items():
            size = int(np.prod(shp))
            out[name] = np.array(theta[pos:pos + size]).reshape(shp)
            pos += size
        return GeneratorModel(self.arch, out)

    def __call__(self, noise: Any) -> np.ndarray:
        return _forward(self, noise)[0]


def _forward(model: GeneratorModel, noise: Any):
    eps = np.asarray(noise, dtype=np.float64)
    if eps.ndim != 2 or eps.shape[1] != model.arch.in_dim:
        raise ValueError(f"noise must be N x {model.arch.in_dim}, got shape {eps.shape}")
    p, act = model.params, model.arch.activation
    cache = {"eps": eps}
    if model.arch.hidden == 0:
        return eps @ p["out.W"].T + p["out.b"], cache
    z = eps @ p["in.W"].T + p["in.b"]
    h = _act(act, z)
    cache["in"] = (z, h)
    for k in range(model.arch.n_blocks):
        z1 = h @ p[f"block{k}.W1"].T + p[f"block{k}.b1"]
        u = _act(act, z1)
        cache[f"block{k}"] = (h, z1, u)
        h = h + u @ p[f"block{k}.W2"].T + p[f"block{k}.b2"]
    cache["h_out"] = h
    return h @ p["out.W"].T + p["out.b"], cache


def forward(model: GeneratorModel, noise_batch: Any) -> ParticleBatch:
    return ParticleBatch(model(noise_batch), Role.MODEL)


def _backward(model: GeneratorModel, cache: dict, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    p, act = model.params, model.arch.activation
    g: dict[str, np.ndarray] = {}
    if model.arch.hidden == 0:
        g["out.W"] = grad_out.T @ cache["eps"]
        g["out.b"] = grad_out.sum(axis=0)
        return g
    g["out.W"] = grad_out.T @ cache["h_out"]
    g["out.b"] = grad_out.sum(axis=0)
    gh = grad_out @ p["out.W"]
    for k in reversed(range(model.arch.n_blocks)):
        h_prev, z1, u = cache[f"block{k}"]
        g[f"block{k}.W2"] = gh.T @ u
        g[f"block{k}.b2"] = gh.sum(axis=0)
        gz1 = (gh @ p[f"block{k}.W2"]) * _act_grad(act, z1, u)
        g[f"block{k}.W1"] = gz1.T @ h_prev
        g[f"block{k}.b1"] = gz1.sum(axis=0)
        gh = gh + gz1 @ p[f"block{k}.W1"]
    z, h = cache["in"]
    gz = gh * _act_grad(act, z, h)
    g["in.W"] = gz.T @ cache["eps"]
    g["in.b"] = gz.sum(axis=0)
    return g


def backward_mse(model: GeneratorModel, noise_batch: Any, targets: Any) -> tuple[float, dict[str, np.ndarray]]:
    """Loss ``(1/N) sum_i |f(eps_i) - t_i|^2`` and its exact parameter gradients.

    ``targets`` are plain numbers: nothing flows back through them.
    """
    out, cache = _forward(model, noise_batch)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != out.shape:
        raise ValueError(f"targets must have shape {out.shape}, got {t.shape}")
    resid = out - t
    n = out.shape[0]
    loss = float(np.sum(resid * resid) / n)
    return loss, _backward(model, cache, (2.0 / n) * resid)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: dict[str, np.ndarray], state: AdamState, grads: dict[str, np.ndarray], lr: float
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ValueError(f"{k}: gradient shape {grads[k].shape} != parameter shape {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * grads[k]
        v = b2 * state.v[k] + (1.0 - b2) * grads[k] * grads[k]
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


# --------------------------------------------------------------------------
# training

TRAIN_COLUMNS = ("step", "loss", "mmd2_holdout")


@dataclass(frozen=True)
class TrainConfig:
    drift: DriftConfig = field(default_factory=lambda: DriftConfig("mmd", bandwidths=(0.05, 0.2, 0.8)))
    arch: Architecture = field(default_factory=Architecture)
    data_batch: int = 256
    model_batch: int = 256
    eta: float = 1.0
    lr: float = 1e-4
    n_steps: int = 1000
    eval_every: int = 100
    holdout_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.data_batch < 1 or self.model_batch < 1 or self.holdout_size < 2:
            raise ConfigError("batch sizes must be >= 1 (holdout >= 2)")
        if self.n_steps < 0 or self.eval_every < 1:
            raise ConfigError("n_steps must be >= 0 and eval_every >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["drift"] = self.drift.to_dict()
        return out


@dataclass(frozen=True)
class TrainRecord:
    step: int
    loss: float
    mmd2_holdout: float
    diverged: bool = False

    def row(self) -> list:
        return [self.step, repr(self.loss), repr(self.mmd2_holdout)]


@dataclass
class TrainResult:
    model: GeneratorModel
    records: list[TrainRecord]
    diverged: bool
    holdout: np.ndarray
    eval_noise: np.ndarray


class TrainError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"drift failed at training step {step}: {cause}")


def train(
    cfg: TrainConfig,
    data_sampler: Callable[[int, RngHandle], Any],
    model: GeneratorModel | None = None,
    callback: Callable[[int, GeneratorModel, TrainRecord, np.ndarray], None] | None = None,
    extra_eval_steps: Iterable[int] = (),
) -> TrainResult:
    """Drifted-target training.

    Per step: sample a data batch and a fresh noise batch, push the noise
    through the generator, compute the drift at the generated samples
    against both batches, and take one Adam step on the mean squared error to
    the detached targets ``x + eta * V(x)``. On steps divisible by
    ``eval_every`` (and the last) the held-out median-heuristic MMD^2 between
    generated samples from a fixed noise batch and a held-out data batch is
    recorded, as on any of ``extra_eval_steps``. ``callback`` sees each
    evaluation together with the generated evaluation samples. Non-finite
    parameters stop the run with ``diverged=True``.
    """
    root = RngHandle(cfg.seed)
    if model is None:
        model = GeneratorModel.init(cfg.arch, root.substream(0))
    else:
        model = model.copy()
    c = model.arch.in_dim
    holdout = as_positions(data_sampler(cfg.holdout_size, root.substream(10)))
    eval_noise = root.substream(11).generator().standard_normal((cfg.holdout_size, c))
    data_rng, noise_rng, drift_rng = root.substream(1), root.substream(2), root.substream(3)
    state = AdamState.zeros_like(model.params)
    records: list[TrainRecord] = []
    diverged = False
    extra = set(extra_eval_steps)
    for step in range(cfg.n_steps + 1):
        y = as_positions(data_sampler(cfg.data_batch, data_rng.substream(step)))
        eps = noise_rng.substream(step).generator().standard_normal((cfg.model_batch, c))
        out, cache = _forward(model, eps)
        if not np.all(np.isfinite(out)):
            diverged = True
            records.append(TrainRecord(step, math.nan, math.nan, True))
            break
        try:
            v = compute_drift(cfg.drift, out, y, drift_rng.substream(step))
        except Exception as err:  # noqa: BLE001 - re-raised with the step attached
            raise TrainError(step, err) from err
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked below
            targets = out + cfg.eta * v  # detached: a plain array
            resid = out - targets
            loss = float(np.sum(resid * resid) / out.shape[0])
        if step % cfg.eval_every == 0 or step == cfg.n_steps or step in extra:
            gen_eval = model(eval_noise)
            mmd = mmd2_median(gen_eval, holdout) if np.all(np.isfinite(gen_eval)) else math.nan
            rec = TrainRecord(step, loss, mmd, not math.isfinite(loss))
            records.append(rec)
            if callback is not None:
                callback(step, model, rec, gen_eval)
        if step == cfg.n_steps:
            break
        if not math.isfinite(loss):
            diverged = True
            if records[-1].step != step:
                records.append(TrainRecord(step, loss, math.nan, True))
            break
        with np.errstate(over="ignore", invalid="ignore"):
            grads = _backward(model, cache, (2.0 / out.shape[0]) * resid)
            new_params, state = adam_step(model.params, state, grads, cfg.lr)
        if not all(np.all(np.isfinite(p)) for p in new_params.values()):
            diverged = True
            records.append(TrainRecord(step + 1, math.nan, math.nan, True))
            break
        model = GeneratorModel(model.arch, new_params)
    return TrainResult(model, records, diverged, holdout, eval_noise)


def write_train_csv(path: str | Path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_COLUMNS)
        for r in records:
            w.writerow(r.row())


def save_checkpoint(path: str | Path, model: GeneratorModel, extra: dict | None = None) -> None:
    """JSON dump: architecture descriptor plus every parameter as nested lists."""
    doc = {
        "architecture": asdict(model.arch),
        "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in model.params.items()},
    }
    if extra:
        doc["meta"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> GeneratorModel:
    doc = json.loads(Path(path).read_text())
    arch = Architecture(**doc["architecture"])
    params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    return GeneratorModel(arch, params)
