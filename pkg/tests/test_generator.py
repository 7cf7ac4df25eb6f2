import math

import numpy as np
import pytest

import driftflow.generator as gmod
from driftflow.core import ConfigError, DatasetSpec, RngHandle, sample_dataset
from driftflow.drifts import DriftConfig
from driftflow.generator import (
    AdamState,
    Architecture,
    GeneratorModel,
    TrainConfig,
    adam_step,
    backward_mse,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
    write_train_csv,
)

SMALL = Architecture(2, 3, 1, 2)


def _model(arch=SMALL, seed=0):
    return GeneratorModel.init(arch, RngHandle(seed))


def test_architecture_validation_and_shapes():
    with pytest.raises(ConfigError):
        Architecture(hidden=0, n_blocks=1)
    with pytest.raises(ConfigError):
        Architecture(activation="sigmoid")
    assert list(Architecture(2, 0, 0, 2).shapes()) == ["out.W", "out.b"]
    # 2->128, two 128x128 blocks, 128->2
    assert _model(Architecture()).n_params == 128 * 2 + 128 + 2 * (2 * 128 * 128 + 2 * 128) + 2 * 128 + 2


def test_init_bounds_and_zero_output():
    m = _model(Architecture(2, 16, 1, 2))
    assert np.abs(m.params["in.W"]).max() <= 1 / math.sqrt(2)
    assert np.abs(m.params["block0.W1"]).max() <= 1 / 4
    z = GeneratorModel.init(SMALL, RngHandle(0), zero_output=True)
    assert np.all(z(np.ones((5, 2))) == 0.0)


def test_linear_identity():
    m = GeneratorModel(Architecture(2, 0, 0, 2), {"out.W": np.eye(2), "out.b": np.zeros(2)})
    e = np.random.default_rng(0).normal(size=(4, 2))
    np.testing.assert_array_equal(forward(m, e).positions, e)


def _loop_forward(m, e):
    p = m.params
    out = []
    for row in e:
        h = [math.tanh(sum(p["in.W"][j][k] * row[k] for k in range(2)) + p["in.b"][j]) for j in range(3)]
        u = [math.tanh(sum(p["block0.W1"][j][k] * h[k] for k in range(3)) + p["block0.b1"][j]) for j in range(3)]
        h = [h[j] + sum(p["block0.W2"][j][k] * u[k] for k in range(3)) + p["block0.b2"][j] for j in range(3)]
        out.append([sum(p["out.W"][j][k] * h[k] for k in range(3)) + p["out.b"][j] for j in range(2)])
    return np.array(out)


def test_forward_matches_per_neuron_loops():
    m = _model()
    e = np.random.default_rng(1).normal(size=(6, 2))
    np.testing.assert_allclose(m(e), _loop_forward(m, e), atol=1e-12)


def test_noise_shape_checked():
    with pytest.raises(ValueError):
        _model()(np.zeros((3, 3)))


def test_targets_equal_outputs_zero_gradient():
    m = _model()
    e = np.random.default_rng(2).normal(size=(5, 2))
    loss, g = backward_mse(m, e, m(e))
    assert loss == 0.0 and all(np.all(v == 0) for v in g.values())


def test_single_linear_neuron_by_hand():
    m = GeneratorModel(Architecture(1, 0, 0, 1), {"out.W": [[2.0]], "out.b": [1.0]})
    loss, g = backward_mse(m, [[1.0], [3.0]], [[0.0], [0.0]])
    # outputs 3, 7: loss (9 + 49) / 2, dW = (2/2)(3*1 + 7*3), db = (2/2)(3 + 7)
    assert loss == 29.0
    assert g["out.W"][0, 0] == 24.0 and g["out.b"][0] == 10.0


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_gradient_matches_finite_differences(act):
    arch = Architecture(2, 5, 2, 2, act)
    m = _model(arch, 3)
    g = np.random.default_rng(3)
    e, t = g.normal(size=(7, 2)), g.normal(size=(7, 2))
    _, grads = backward_mse(m, e, t)
    flat_g = np.concatenate([grads[k].ravel() for k in arch.shapes()])
    theta = m.flat()
    h = 1e-6
    for i in g.choice(theta.size, 20, replace=False):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (backward_mse(m.with_flat(tp), e, t)[0] - backward_mse(m.with_flat(tm), e, t)[0]) / (2 * h)
        assert abs(fd - flat_g[i]) < 1e-6 * max(1.0, abs(fd))


def test_adam_zero_gradient_no_move():
    p = {"w": np.array([1.0, -2.0])}
    new, st = adam_step(p, AdamState.zeros_like(p), {"w": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert st.t == 1


def test_adam_constant_gradient_step_is_lr():
    p = {"w": np.array([0.0])}
    st = AdamState.zeros_like(p)
    for _ in range(50):
        new, st = adam_step(p, st, {"w": np.array([3.0])}, 0.01)
        assert abs(abs(new["w"][0] - p["w"][0]) - 0.01) < 1e-8
        p = new


def test_adam_hand_trace():
    grads = [0.5, -1.0, 2.0, 0.0, 0.3, -0.7, 1.1, 0.2, -0.4, 0.9]
    p = {"w": np.array([0.25])}
    st = AdamState.zeros_like(p)
    w, m, v = 0.25, 0.0, 0.0
    for t, gval in enumerate(grads, start=1):
        p, st = adam_step(p, st, {"w": np.array([gval])}, 0.05)
        m = 0.9 * m + 0.1 * gval
        v = 0.999 * v + 0.001 * gval * gval
        w = w - 0.05 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(p["w"][0] - w) < 1e-12


def test_adam_functional():
    p = {"w": np.array([1.0])}
    st = AdamState.zeros_like(p)
    adam_step(p, st, {"w": np.array([1.0])}, 0.1)
    assert p["w"][0] == 1.0 and st.t == 0 and st.m["w"][0] == 0.0


def _moons(n, rng):
    return sample_dataset(DatasetSpec("moons"), n, rng)


def _small_cfg(**kw):
    base = dict(drift=DriftConfig("mmd", bandwidths=(0.05, 0.2, 0.8)), arch=Architecture(2, 16, 1, 2),
                data_batch=32, model_batch=32, lr=1e-3, n_steps=20, eval_every=10, holdout_size=64)
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        _small_cfg(eta=0.0)
    with pytest.raises(ConfigError):
        _small_cfg(lr=-1.0)
    assert _small_cfg().to_dict()["drift"]["kind"] == "mmd"


def test_zero_drift_leaves_parameters_unchanged(monkeypatch):
    monkeypatch.setattr(gmod, "compute_drift", lambda cfg, x, y, rng: np.zeros_like(x))
    m0 = _model(Architecture(2, 16, 1, 2))
    res = train(_small_cfg(), _moons, model=m0)
    np.testing.assert_array_equal(res.model.flat(), m0.flat())
    assert all(r.loss == 0.0 for r in res.records)


def test_stop_gradient_update_is_surrogate(monkeypatch):
    """The step only sees -(2 eta / N) V as the output gradient."""
    arch = Architecture(2, 8, 1, 2)
    m = _model(arch)
    e = np.random.default_rng(5).normal(size=(10, 2))
    out = m(e)
    v = np.random.default_rng(6).normal(size=out.shape)
    _, g = backward_mse(m, e, out + 0.7 * v)
    _, cache = gmod._forward(m, e)
    ref = gmod._backward(m, cache, -(2 * 0.7 / 10) * v)
    for k in g:
        np.testing.assert_allclose(g[k], ref[k], atol=1e-14)


def test_train_deterministic_and_records(tmp_path):
    cfg = _small_cfg()
    seen = []
    a = train(cfg, _moons, callback=lambda s, m, r, x: seen.append((s, x.shape)))
    b = train(cfg, _moons)
    np.testing.assert_array_equal(a.model.flat(), b.model.flat())
    assert [r.step for r in a.records] == [0, 10, 20]
    assert seen == [(0, (64, 2)), (10, (64, 2)), (20, (64, 2))]
    assert not a.diverged
    write_train_csv(tmp_path / "t.csv", a.records)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "step,loss,mmd2_holdout"


def test_train_extra_eval_steps():
    res = train(_small_cfg(n_steps=5, eval_every=100), _moons, extra_eval_steps=[2])
    assert [r.step for r in res.records] == [0, 2, 5]


def test_train_reduces_holdout_mmd():
    cfg = _small_cfg(n_steps=300, eval_every=300, lr=3e-3, data_batch=128, model_batch=128, holdout_size=256)
    res = train(cfg, _moons)
    assert res.records[-1].mmd2_holdout < 0.5 * res.records[0].mmd2_holdout


def test_tiny_tau_kl_never_crashes():
    res = train(_small_cfg(drift=DriftConfig("kl", tau=1e-9), n_steps=5), _moons)
    assert len(res.records) >= 1


def test_divergence_flagged():
    res = train(_small_cfg(eta=1e300, lr=1e300, n_steps=10, drift=DriftConfig("sw", n_slices=4)), _moons)
    assert res.diverged and res.records[-1].diverged


def test_checkpoint_round_trip(tmp_path):
    m = _model(Architecture(2, 4, 1, 2))
    save_checkpoint(tmp_path / "c.json", m, {"step": 3})
    back = load_checkpoint(tmp_path / "c.json")
    assert back.arch == m.arch
    np.testing.assert_array_equal(back.flat(), m.flat())
