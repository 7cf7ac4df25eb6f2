import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from driftflow.core import ConfigError, RngHandle, atoms
from driftflow.drift_kl import kl_drift
from driftflow.kernels import PARZEN, KernelSpec
from driftflow.sinkhorn import (
    DA2,
    OURS,
    SQ,
    SinkhornConfig,
    SinkhornConvergenceError,
    debiased_sinkhorn_divergence,
    iterate_symmetric_normalization,
    population_proxy,
    population_proxy_drift,
    sinkhorn_exact_drift,
    sinkhorn_exact_field,
    sinkhorn_from_cost,
    sinkhorn_proxy_drift,
    sinkhorn_proxy_terms,
    sinkhorn_solve,
)

TIGHT = SinkhornConfig(0.5, 5000, 1e-13)


def test_config_validation():
    for bad in (dict(tau=0), dict(max_iters=0), dict(marginal_tol=0), dict(cost_convention="l1")):
        with pytest.raises(ConfigError):
            SinkhornConfig(**{"tau": 1.0, **bad})


def _brute_off_diagonal(tau):
    """Scalar search over couplings [[a, 1/2-a], [1/2-a, a]] of the entropic objective."""
    def obj(a):
        b = 0.5 - a
        return b * 0.5 * 2 + tau * (2 * a * math.log(a) + 2 * b * math.log(b))

    lo, hi = 1e-300, 0.5 - 1e-300
    for _ in range(300):  # golden section
        m1, m2 = lo + (hi - lo) * 0.382, lo + (hi - lo) * 0.618
        if obj(m1) < obj(m2):
            hi = m2
        else:
            lo = m1
    return 0.5 - 0.5 * (lo + hi)


def test_two_point_plan_is_diagonal():
    plan = sinkhorn_solve(SinkhornConfig(1e-3, 100, 1e-9), [[0.0], [1.0]], [[0.0], [1.0]])
    p = np.exp(plan.log_plan)
    assert plan.converged
    assert p[0, 1] < 1e-6 and p[1, 0] < 1e-6
    np.testing.assert_allclose(np.diag(p), [0.5, 0.5], atol=1e-12)


def test_two_point_plan_matches_brute_force_at_moderate_tau():
    tau = 0.2
    plan = sinkhorn_solve(SinkhornConfig(tau, 1000, 1e-14), [[0.0], [1.0]], [[0.0], [1.0]])
    off = math.exp(plan.log_plan[0, 1])
    assert off == pytest.approx(_brute_off_diagonal(tau), abs=1e-7)  # golden section resolves ~sqrt(eps)
    # frozen from the scalar search: 1 / (2 (1 + e^{1/(2 tau)}))
    assert off == pytest.approx(0.5 / (1 + math.exp(0.5 / tau)), rel=1e-9)


def test_converged_plans_row_stochastic(gen):
    x, y = gen.normal(size=(7, 2)), gen.normal(size=(5, 2))
    plan = sinkhorn_solve(TIGHT, x, y)
    assert plan.converged and plan.iterations_used < 5000
    np.testing.assert_allclose(plan.conditional().sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.exp(plan.log_plan) <= 1.0)
    assert plan.row_marginal_err <= 1e-13 and plan.col_marginal_err <= 1e-13


def test_self_plan_symmetric_with_equal_potentials(gen):
    x = gen.normal(size=(6, 2))
    plan = sinkhorn_solve(TIGHT, x, x)
    np.testing.assert_allclose(plan.log_plan, plan.log_plan.T, atol=1e-10)
    diff = plan.f - plan.g
    assert np.ptp(diff) < 1e-9


def test_unconverged_plan_reported():
    plan = sinkhorn_solve(SinkhornConfig(0.01, 1, 1e-12), [[0.0], [1.0], [5.0]], [[0.2], [3.0]])
    assert not plan.converged and plan.iterations_used == 1
    with pytest.raises(SinkhornConvergenceError):
        sinkhorn_exact_drift(SinkhornConfig(0.01, 1, 1e-12), [[0.0], [1.0], [5.0]], [[0.2], [3.0]])
    v = sinkhorn_exact_drift(SinkhornConfig(0.01, 1, 1e-12), [[0.0], [1.0], [5.0]], [[0.2], [3.0]], strict=False)
    assert np.isfinite(v).all()


def test_nonfinite_cost_rejected():
    with pytest.raises(ValueError):
        sinkhorn_from_cost(np.array([[0.0, np.inf]]), 1.0)


def test_plan_csv(tmp_path):
    plan = sinkhorn_solve(TIGHT, [[0.0], [1.0]], [[0.5]])
    plan.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "i,j,log_weight" and len(lines) == 3


def test_exact_drift_trivial_cases(gen):
    x = gen.normal(size=(5, 2))
    assert np.all(sinkhorn_exact_drift(TIGHT, x, x.copy()) == 0.0)
    np.testing.assert_allclose(sinkhorn_exact_drift(TIGHT, [[0.5, 1.0]], [[2.0, -1.0]]), [[1.5, -2.0]], atol=1e-15)


def test_sq_cost_doubles_velocity(gen):
    x, y = gen.normal(size=(4, 1)), gen.normal(size=(4, 1))
    half = sinkhorn_exact_drift(SinkhornConfig(0.5, 5000, 1e-13), x, y)
    full = sinkhorn_exact_drift(SinkhornConfig(1.0, 5000, 1e-13, SQ), x, y)
    np.testing.assert_allclose(full, 2 * half, atol=1e-10)


def test_exact_drift_is_minus_scaled_gradient_of_divergence():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(4, 1)), rng.normal(loc=1.0, size=(4, 1))
    v = sinkhorn_exact_drift(TIGHT, x, y)
    h = 1e-5
    grad = np.zeros_like(x)
    for i in range(4):
        e = np.zeros_like(x)
        e[i, 0] = h
        grad[i, 0] = (debiased_sinkhorn_divergence(TIGHT, x + e, y) - debiased_sinkhorn_divergence(TIGHT, x - e, y)) / (2 * h)
    np.testing.assert_allclose(v, -4 * grad, rtol=1e-4, atol=1e-9)


def test_divergence_zero_on_identical_batches(gen):
    x = gen.normal(size=(5, 2))
    assert abs(debiased_sinkhorn_divergence(TIGHT, x, x)) < 1e-12


def test_field_reproduces_drift_at_particles(gen):
    x, y = gen.normal(size=(5, 2)), gen.normal(loc=0.5, size=(6, 2))
    np.testing.assert_allclose(sinkhorn_exact_field(TIGHT, x, x, y), sinkhorn_exact_drift(TIGHT, x, y), atol=1e-9)


def _proxy_oracle(x, y, tau):
    """Straight-line transcription: geometric-mean pseudo-plans, row sums, cross-weighting."""
    n, m = len(x), len(y)
    zp = [[-sum((x[i][k] - y[j][k]) ** 2 for k in range(len(x[i]))) / tau for j in range(m)] for i in range(n)]
    zm = [[-sum((x[i][k] - x[l][k]) ** 2 for k in range(len(x[i]))) / tau for l in range(n)] for i in range(n)]

    def geo(z, rows, cols):
        a = [[0.0] * cols for _ in range(rows)]
        for i in range(rows):
            for j in range(cols):
                row = math.exp(z[i][j]) / sum(math.exp(z[i][jj]) for jj in range(cols))
                col = math.exp(z[i][j]) / sum(math.exp(z[ii][j]) for ii in range(rows))
                a[i][j] = math.sqrt(row * col)
        return a

    ap, am = geo(zp, n, m), geo(zm, n, n)
    out = []
    for i in range(n):
        sp, sm = sum(ap[i]), sum(am[i])
        out.append(
            [
                sm * sum(ap[i][j] * y[j][k] for j in range(m)) - sp * sum(am[i][l] * x[l][k] for l in range(n))
                for k in range(len(x[i]))
            ]
        )
    return np.array(out)


def test_proxy_matches_transcription_oracle(gen):
    x, y = gen.normal(size=(3, 2)), gen.normal(size=(4, 2))
    np.testing.assert_allclose(sinkhorn_proxy_drift(0.9, x, y, OURS), _proxy_oracle(x.tolist(), y.tolist(), 0.9), atol=1e-12)


def test_proxy_identical_batches_zero(gen):
    x = gen.normal(size=(10, 2))
    for variant in (OURS, DA2):
        assert np.all(sinkhorn_proxy_drift(0.5, x, x.copy(), variant) == 0.0)


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_proxy_translation_invariance(a, b):
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
    s = np.array([a, b])
    for variant in (OURS, DA2):
        np.testing.assert_allclose(sinkhorn_proxy_drift(0.7, x + s, y + s, variant), sinkhorn_proxy_drift(0.7, x, y, variant), atol=1e-9)


def test_proxy_cross_weighting_row_sums(gen):
    x, y = gen.normal(size=(4, 2)), gen.normal(size=(6, 2))
    t = sinkhorn_proxy_terms(0.6, x, y)
    np.testing.assert_allclose(t.s_plus, np.exp(t.log_a_plus).sum(axis=1))
    np.testing.assert_allclose(t.Z, t.s_plus * t.s_minus)


def test_da2_differs_from_ours(gen):
    x, y = gen.normal(size=(4, 2)), gen.normal(size=(5, 2))
    assert not np.allclose(sinkhorn_proxy_drift(0.5, x, y, OURS), sinkhorn_proxy_drift(0.5, x, y, DA2))


def test_ignore_self_masks_diagonal(gen):
    x, y = gen.normal(size=(4, 2)), gen.normal(size=(4, 2))
    t = sinkhorn_proxy_terms(0.5, x, y, ignore_self=True)
    assert np.all(np.isneginf(np.diag(t.log_a_minus)))


def test_population_toy_example():
    p_at, q_at = atoms([[1.0, 0.0]]), atoms([[-1.0, 0.0]])
    res = population_proxy([0.0, 1.0], p_at, q_at, 1.0)
    assert res.Z == pytest.approx(1.0, rel=1e-14)
    h = 1e-6
    grad_phi = [(population_proxy([h * e[0], 1 + h * e[1]], p_at, q_at, 1.0).potential
                 - population_proxy([-h * e[0], 1 - h * e[1]], p_at, q_at, 1.0).potential) / (2 * h) for e in np.eye(2)]
    grad_z = [(population_proxy([h * e[0], 1 + h * e[1]], p_at, q_at, 1.0).Z
               - population_proxy([-h * e[0], 1 - h * e[1]], p_at, q_at, 1.0).Z) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(grad_phi, [2.0, 0.0], atol=1e-7)
    np.testing.assert_allclose(grad_z, [0.0, -2.0], atol=1e-7)
    np.testing.assert_allclose(res.drift, [2.0, 0.0], atol=1e-12)


def test_population_equal_measures_zero():
    at = atoms([[0.0], [1.0], [3.0]], [0.2, 0.5, 0.3])
    drift, z = population_proxy_drift([0.7], at, at, 0.5)
    assert np.all(drift == 0.0) and z > 0


def test_population_two_delta_ratio():
    D, a, b, tau = 1.0, 0.8, 0.4, 0.3
    eps = math.exp(-4 * D * D / tau)
    sup = [[-D], [D]]
    v_sp = population_proxy_drift([D], atoms(sup, [a, 1 - a]), atoms(sup, [b, 1 - b]), tau)[0][0]
    y = np.array([[-D]] * 4 + [[D]])
    x = np.array([[-D]] * 2 + [[D]] * 3)
    v_kl = kl_drift(KernelSpec(PARZEN, tau), x, y, query=[[D]])[0, 0]
    assert abs(v_sp / v_kl / math.sqrt(0.5) - 1) < 10 * eps


def test_empirical_proxy_converges_to_population():
    """Large i.i.d. batches from two 1D Gaussians against a quadrature-grid population."""
    tau, mp, sp, mq, sq = 1.0, 0.8, 0.6, -0.3, 0.9
    grid = np.linspace(-8, 8, 3201)[:, None]
    wp = np.exp(-((grid[:, 0] - mp) ** 2) / (2 * sp**2))
    wq = np.exp(-((grid[:, 0] - mq) ** 2) / (2 * sq**2))
    probes = np.array([[-1.0], [-0.3], [0.2], [0.9], [1.6]])
    pop = np.array([population_proxy_drift(pt, atoms(grid, wp), atoms(grid, wq), tau)[0][0] for pt in probes])
    reps = []
    for r in range(8):
        g = RngHandle(40, r).generator()
        y = mp + sp * g.standard_normal((4096, 1))
        x = np.vstack([probes, mq + sq * g.standard_normal((4096 - len(probes), 1))])
        reps.append(sinkhorn_proxy_drift(tau, x, y, population_scaling=True)[: len(probes), 0])
    reps = np.array(reps)
    mean, se = reps.mean(axis=0), reps.std(axis=0, ddof=1) / math.sqrt(len(reps))
    assert np.all(np.abs(mean - pop) < 3 * se + 1e-3 * np.abs(pop))


def test_symmetric_normalisation_fixed_point_and_convergence(gen):
    ds = np.full((4, 4), 0.25)
    one = iterate_symmetric_normalization(ds, 1)
    assert max(one.err_history[0]) < 1e-14
    a, b = gen.uniform(size=(6, 2)), gen.uniform(size=(6, 2))
    cost = 0.5 * ((a[:, None] - b[None]) ** 2).sum(-1)
    it = np.exp(iterate_symmetric_normalization(np.exp(-cost), 200).log_plan)
    ref = np.exp(sinkhorn_from_cost(cost, 1.0, 10000, 1e-14).log_plan)
    np.testing.assert_allclose(it, ref, atol=1e-8)
    with pytest.raises(ValueError):
        iterate_symmetric_normalization(np.ones((2, 3)), 3)


def test_hub_suppression():
    K = np.array([[1.0, 0.2, 5.0], [0.2, 1.0, 5.0], [0.3, 0.1, 5.0]])
    row_only = K / K.sum(axis=1, keepdims=True)
    sym = np.exp(iterate_symmetric_normalization(K, 1).log_plan) * 3
    # column scaling applied to the hub column relative to the raw matrix
    assert (sym[:, 2] / K[:, 2]).mean() < (row_only[:, 2] / K[:, 2]).mean()
