"""Self-checks of the analytic properties the drifts are supposed to have,
collected into a machine-readable report.

Each check owns one RNG substream of the master seed, declares its tolerance
explicitly, and records how its expected value was obtained.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from .core import ConfigError, RngHandle, atoms
from .drift_kl import kl_drift, smoothed_kl_drift
from .drifts import DRIFT_KINDS, DriftConfig, compute_drift
from .flow import two_delta_row
from .generator import Architecture, GeneratorModel, backward_mse
from .kernels import GIBBS, PARZEN, KernelSpec, log_parzen_density, parzen_score
from .mmd_sw import mmd2, mmd_drift
from .sinkhorn import (
    SinkhornConfig,
    debiased_sinkhorn_divergence,
    iterate_symmetric_normalization,
    population_proxy_drift,
    sinkhorn_exact_drift,
    sinkhorn_exact_field,
    sinkhorn_from_cost,
    sinkhorn_solve,
)

PASS, FAIL = "pass", "fail"
METRIC_CONVENTION = "median of pooled pairwise squared distances, self-pairs excluded, lower median on ties"


@dataclass
class CheckRecord:
    check: str
    status: str
    measured: Any
    expected: Any
    tolerance: Any
    provenance: str
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == PASS


@dataclass
class VerificationReport:
    seed: int
    records: list[CheckRecord] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def get(self, name: str) -> CheckRecord:
        for r in self.records:
            if r.check == name:
                return r
        raise KeyError(name)

    def to_dict(self, timings: bool = False) -> dict:
        recs = []
        for r in self.records:
            d = asdict(r)
            if not timings:
                d.pop("seconds")
            recs.append(d)
        return {"seed": self.seed, "passed": self.passed, "metric_convention": METRIC_CONVENTION, "checks": recs}

    def to_json(self, timings: bool = False) -> str:
        return json.dumps(self.to_dict(timings), indent=2, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _record(name, ok, measured, expected, tolerance, provenance) -> CheckRecord:
    return CheckRecord(name, PASS if ok else FAIL, measured, expected, tolerance, provenance)


def _fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences; column k is d fn / d x_k."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        cols.append((np.ravel(fn(x + e)) - np.ravel(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=1)


def _antisym(jac: np.ndarray) -> float:
    """``d1 V2 - d2 V1`` of a 2x2 Jacobian ``J[a, b] = d V_a / d x_b``."""
    return float(jac[1, 0] - jac[0, 1])


# --------------------------------------------------------------------------
# individual checks


def check_tweedie(rng: RngHandle) -> CheckRecord:
    gen = rng.generator()
    spec = KernelSpec(PARZEN, 0.5)
    support = gen.normal(size=(12, 2))
    queries = gen.normal(scale=1.2, size=(100, 2))
    h, worst = 1e-5, 0.0
    for q in queries:
        s = parzen_score(spec, q, support)
        fd = _fd_jacobian(lambda z: np.array([log_parzen_density(spec, z, support)]), q, h)[0]
        worst = max(worst, float(np.linalg.norm(s - fd) / max(np.linalg.norm(s), 1e-12)))
    tol = 1e-5
    return _record("tweedie", worst < tol, {"max_rel_err": worst, "n_queries": 100}, 0.0, tol, "finite-difference oracle on log density")


def check_consistency(rng: RngHandle) -> CheckRecord:
    x = rng.generator().normal(size=(64, 2))
    norms = {}
    for i, kind in enumerate(DRIFT_KINDS):
        cfg = DriftConfig(kind, tau=0.5, bandwidths=(0.2, 1.0) if kind == "mmd" else None, mc_samples=64)
        v = compute_drift(cfg, x, x.copy(), rng.substream(100 + i))
        norms[kind] = float(np.max(np.linalg.norm(v, axis=1)))
    ok = all(n == 0.0 for n in norms.values())
    return _record("consistency_identical_batches", ok, norms, 0.0, 0.0, "exact: every drift vanishes on identical batches")


def _toy_fields():
    """Fields at a 2D query for the single-atom configuration p=d(1,0), q=d(-1,0), tau=1."""
    p = np.array([[1.0, 0.0]])
    q = np.array([[-1.0, 0.0]])
    tau = 1.0
    p_at, q_at = atoms(p), atoms(q)
    return {
        "proxy": lambda z: population_proxy_drift(z, p_at, q_at, tau)[0],
        "kl": lambda z: kl_drift(KernelSpec(PARZEN, tau), q, p, query=z.reshape(1, -1))[0],
        "mmd": lambda z: mmd_drift(KernelSpec(GIBBS, tau), q, p, query=z.reshape(1, -1))[0],
        "sinkhorn_exact": lambda z: sinkhorn_exact_field(SinkhornConfig(tau, 2000, 1e-13), z.reshape(1, -1), q, p)[0],
    }


def check_curl_toy(rng: RngHandle) -> CheckRecord:
    x0 = np.array([0.0, 1.0])
    fields = _toy_fields()
    measured = {name: _antisym(_fd_jacobian(fn, x0, 1e-5)) for name, fn in fields.items()}
    tol_proxy, tol_other = 4e-3, 1e-3
    ok = abs(measured["proxy"] - 4.0) <= tol_proxy and all(abs(measured[k]) < tol_other for k in ("kl", "mmd", "sinkhorn_exact"))
    return _record(
        "curl_toy",
        ok,
        measured,
        {"proxy": 4.0, "kl": 0.0, "mmd": 0.0, "sinkhorn_exact": 0.0},
        {"proxy": tol_proxy, "others_abs": tol_other},
        "closed form of the single-atom toy configuration; finite-difference Jacobians",
    )


def check_failure_modes(rng: RngHandle) -> CheckRecord:
    D, alpha, beta = 1.0, 0.8, 0.4
    taus = (0.5, 0.4, 0.3)
    rows = [two_delta_row(D, alpha, beta, t) for t in taus]
    kl_target = alpha / (1 - alpha) - beta / (1 - beta)
    sp_target = math.sqrt((1 - alpha) / beta)
    kl_dev = [abs(r.v_kl / (-2 * D * r.eps) / kl_target - 1) for r in rows]
    sp_dev = [abs(r.ratio / sp_target - 1) for r in rows]
    le = np.array([r.log_eps for r in rows])
    lv = np.log(np.abs([r.v_kl for r in rows]))
    slope = float(np.polyfit(le, lv, 1)[0])
    w2 = [r.v_w2 for r in rows]
    ok = max(kl_dev) < 1e-2 and max(sp_dev) < 1e-2 and abs(slope - 1) < 0.02 and all(math.isclose(v, -4.0 / 3.0, rel_tol=1e-15) for v in w2)
    return _record(
        "failure_modes",
        ok,
        {"kl_rel_dev": kl_dev, "sp_ratio_rel_dev": sp_dev, "loglog_slope": slope, "v_w2": w2},
        {"kl_over_minus_2De": kl_target, "sp_over_kl": sp_target, "slope": 1.0, "v_w2": -4.0 / 3.0},
        {"kl_rel": 1e-2, "sp_rel": 1e-2, "slope_abs": 0.02, "v_w2_rel": 1e-15},
        "closed-form two-atom asymptotics; exact log-space population drifts",
    )


def check_sinkhorn_gradient(rng: RngHandle) -> CheckRecord:
    gen = rng.generator()
    x = gen.normal(size=(6, 1))
    y = gen.normal(loc=0.7, size=(6, 1))
    cfg = SinkhornConfig(0.5, 5000, 1e-13)
    v = sinkhorn_exact_drift(cfg, x, y)
    n = x.shape[0]
    grad = _fd_jacobian(lambda z: np.array([debiased_sinkhorn_divergence(cfg, z.reshape(x.shape), y)]), x.ravel(), 1e-5)[0]
    fd_v = -n * grad.reshape(x.shape)
    rel = float(np.linalg.norm(v - fd_v) / np.linalg.norm(fd_v))
    plans = [sinkhorn_solve(cfg, x, y), sinkhorn_solve(cfg, x, x)]
    row_err = max(float(np.max(np.abs(p.conditional().sum(axis=1) - 1))) for p in plans)
    ok = rel < 1e-4 and row_err < 1e-9
    return _record(
        "sinkhorn_gradient",
        ok,
        {"rel_err": rel, "row_stochastic_err": row_err},
        "drift = -N * grad S",
        {"rel_err": 1e-4, "row_stochastic_err": 1e-9},
        "finite-difference oracle on the debiased divergence",
    )


def check_symmetric_normalization(rng: RngHandle) -> CheckRecord:
    gen = rng.generator()
    a, b = gen.uniform(size=(6, 2)), gen.uniform(size=(6, 2))
    tau = 1.0
    cost = 0.5 * ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    it_plan = np.exp(iterate_symmetric_normalization(np.exp(-cost / tau), 200).log_plan)
    ref = np.exp(sinkhorn_from_cost(cost, tau, 10000, 1e-14).log_plan)
    err = float(np.max(np.abs(it_plan - ref)))
    return _record(
        "symmetric_normalization",
        err < 1e-8,
        {"max_abs_err": err},
        "converged Sinkhorn joint plan",
        1e-8,
        "tightly converged Sinkhorn solve as oracle",
    )


def _small_generator(rng: RngHandle) -> GeneratorModel:
    arch = Architecture(in_dim=2, hidden=8, n_blocks=1, out_dim=2, activation="tanh")
    return GeneratorModel.init(arch, rng)


def check_surrogate_gradient(rng: RngHandle) -> CheckRecord:
    model = _small_generator(rng.substream(0))
    gen = rng.substream(1).generator()
    eps = gen.standard_normal((32, 2))
    y = gen.normal(loc=0.5, size=(40, 2))
    kernel = KernelSpec(GIBBS, 1.0, (0.5, 2.0))
    eta = 0.5
    x = model(eps)
    targets = x + eta * mmd_drift(kernel, x, y)
    _, grads = backward_mse(model, eps, targets)
    g_flat = np.concatenate([grads[k].ravel() for k in model.arch.shapes()])
    theta = model.flat()

    def energy(th):
        return 0.5 * mmd2(kernel, y, model.with_flat(th)(eps))

    h, worst = 1e-5, 0.0
    for _ in range(10):
        u = gen.standard_normal(theta.size)
        u /= np.linalg.norm(u)
        fd = (energy(theta + h * u) - energy(theta - h * u)) / (2 * h)
        an = float(g_flat @ u) / (2 * eta)
        worst = max(worst, abs(an - fd) / max(abs(fd), 1e-12))
    return _record(
        "surrogate_gradient",
        worst < 1e-3,
        {"max_rel_err": worst, "n_params": model.n_params, "n_directions": 10},
        "grad L = 2 eta grad F",
        1e-3,
        "finite differences of the fixed-batch MMD energy",
    )


def check_backprop(rng: RngHandle) -> CheckRecord:
    arch = Architecture(in_dim=3, hidden=16, n_blocks=2, out_dim=2, activation="tanh")
    model = GeneratorModel.init(arch, rng.substream(0))
    gen = rng.substream(1).generator()
    eps = gen.standard_normal((24, 3))
    targets = gen.standard_normal((24, 2))
    _, grads = backward_mse(model, eps, targets)
    g_flat = np.concatenate([grads[k].ravel() for k in arch.shapes()])
    theta = model.flat()
    probes = gen.choice(theta.size, size=20, replace=False)
    h, worst = 1e-5, 0.0

    def loss(th):
        return backward_mse(model.with_flat(th), eps, targets)[0]

    for k in probes:
        e = np.zeros_like(theta)
        e[k] = h
        fd = (loss(theta + e) - loss(theta - e)) / (2 * h)
        worst = max(worst, abs(fd - g_flat[k]) / max(abs(fd), abs(g_flat[k]), 1e-7))
    return _record("backprop", worst < 1e-4, {"max_rel_err": worst, "n_probes": 20}, 0.0, 1e-4, "central finite differences")


def _smoothed_kl_quadrature(p_at, q_at, tau, query, n_grid=200001) -> float:
    """Trapezoid integral of the 1D score difference against N(query, tau/2)."""
    s = math.sqrt(tau / 2)
    z = np.linspace(query - 12 * s, query + 12 * s, n_grid)
    dens = np.exp(-((z - query) ** 2) / tau) / math.sqrt(math.pi * tau)

    def score(support):
        logits = -((z[:, None] - support[None, :]) ** 2) / tau
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        return (2 / tau) * (w @ support - z)

    return float(np.trapezoid(dens * (score(p_at) - score(q_at)), z)) if hasattr(np, "trapezoid") else float(
        np.trapz(dens * (score(p_at) - score(q_at)), z)
    )


def check_smoothed_kl_distinction(rng: RngHandle) -> CheckRecord:
    y = np.array([[0.0]])  # data support
    x = np.array([[0.5]])  # model support
    q = np.array([[0.0]])
    spec = KernelSpec(PARZEN, 1.0)
    kl = float(kl_drift(spec, x, y, query=q)[0, 0])
    est = smoothed_kl_drift(spec, x, y, query=q, mc_samples=4096, rng=rng)
    sm, se = float(est.mean[0, 0]), float(est.stderr[0, 0])
    quad = _smoothed_kl_quadrature(y[:, 0], x[:, 0], 1.0, 0.0)
    gap = abs(sm - kl)
    ok = gap > 5 * se and abs(sm - quad) <= max(5 * se, 1e-6)
    return _record(
        "smoothed_kl_distinction",
        ok,
        {"kl_drift": kl, "smoothed_kl": sm, "stderr": se, "quadrature": quad, "gap": gap},
        {"gap_over_stderr": "> 5"},
        {"n_stderr": 5, "quadrature_abs": 1e-6},
        "both estimators plus a trapezoid quadrature oracle",
    )


def _sym_err(fn, x0, h=1e-5) -> float:
    j = _fd_jacobian(fn, x0, h)
    return float(np.max(np.abs(j - j.T)) / max(np.max(np.abs(j)), 1e-12))


def check_kl_conservative(rng: RngHandle) -> CheckRecord:
    gen = rng.generator()
    x, y = gen.normal(size=(7, 2)), gen.normal(loc=0.8, size=(9, 2))
    spec = KernelSpec(PARZEN, 0.7)
    errs = [_sym_err(lambda z: kl_drift(spec, x, y, query=z.reshape(1, -1))[0], q) for q in gen.normal(size=(5, 2))]
    return _record("kl_conservative", max(errs) < 1e-4, {"max_asym": max(errs)}, 0.0, 1e-4, "finite-difference Jacobian symmetry")


def check_mmd_conservative(rng: RngHandle) -> CheckRecord:
    gen = rng.generator()
    x, y = gen.normal(size=(7, 2)), gen.normal(loc=0.8, size=(9, 2))
    spec = KernelSpec(GIBBS, 1.0, (0.3, 1.5))
    errs = [_sym_err(lambda z: mmd_drift(spec, x, y, query=z.reshape(1, -1))[0], q) for q in gen.normal(size=(5, 2))]
    return _record("mmd_conservative", max(errs) < 1e-4, {"max_asym": max(errs)}, 0.0, 1e-4, "finite-difference Jacobian symmetry")


def check_sinkhorn_conservative(rng: RngHandle) -> CheckRecord:
    gen = rng.generator()
    x, y = gen.normal(size=(4, 2)), gen.normal(loc=0.5, size=(5, 2))
    cfg = SinkhornConfig(0.5, 5000, 1e-13)
    err = _sym_err(lambda z: sinkhorn_exact_drift(cfg, z.reshape(x.shape), y), x.ravel())
    return _record("sinkhorn_exact_conservative", err < 1e-4, {"max_asym": err}, 0.0, 1e-4, "finite-difference Jacobian symmetry")


CHECKS: dict[str, Callable[[RngHandle], CheckRecord]] = {
    "tweedie": check_tweedie,
    "consistency_identical_batches": check_consistency,
    "curl_toy": check_curl_toy,
    "failure_modes": check_failure_modes,
    "sinkhorn_gradient": check_sinkhorn_gradient,
    "symmetric_normalization": check_symmetric_normalization,
    "surrogate_gradient": check_surrogate_gradient,
    "backprop": check_backprop,
    "smoothed_kl_distinction": check_smoothed_kl_distinction,
    "kl_conservative": check_kl_conservative,
    "mmd_conservative": check_mmd_conservative,
    "sinkhorn_exact_conservative": check_sinkhorn_conservative,
}
CHECK_NAMES = tuple(CHECKS)


def resolve_selector(selector: Iterable[str] | str) -> list[str]:
    names = [selector] if isinstance(selector, str) else list(selector)
    if not names:
        raise ConfigError("empty check selector")
    if "all" in names:
        return list(CHECK_NAMES)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {', '.join(unknown)}; valid names: all, {', '.join(CHECK_NAMES)}")
    return [n for n in CHECK_NAMES if n in names]


def run_verification_suite(selector: Iterable[str] | str = "all", seed: int = 0) -> VerificationReport:
    """Run the named checks (registry order) and collect their records."""
    names = resolve_selector(selector)
    root = RngHandle(seed)
    report = VerificationReport(seed)
    for name in names:
        t0 = time.perf_counter()
        rec = CHECKS[name](root.substream(CHECK_NAMES.index(name)))
        rec.seconds = time.perf_counter() - t0
        report.records.append(rec)
    return report
