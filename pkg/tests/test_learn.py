import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stable_opinf import dataprep, learn, models, stability
from stable_opinf.dataprep import SnapshotDataset
from stable_opinf.learn import StableParametrization, TrainConfig


def random_params(rng, n, m, generalized=False, scale=1.0):
    return StableParametrization(
        rng.normal(scale=scale, size=(n, n)), rng.normal(scale=scale, size=(n, n)),
        rng.normal(scale=scale, size=(n, n, n)), rng.normal(scale=scale, size=(n, m)),
        Qbar=rng.normal(scale=scale, size=(n, n)) if generalized else None)


def dataset_from(sys, rng, k=40, scale=1.0):
    X = rng.normal(scale=scale, size=(sys.n, k))
    U = rng.normal(size=(sys.m, k))
    return SnapshotDataset(X, U, np.arange(k, dtype=float), sys(X, U))


def test_zero_parametrization_gives_damped_linear_part():
    p = StableParametrization(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3, 3)), np.zeros((3, 1)))
    sys = learn.materialize(p)
    np.testing.assert_array_equal(sys.A, -1e-8 * np.eye(3))
    np.testing.assert_array_equal(sys.H, 0.0)


def test_materialize_reproduces_example_one():
    Hbar = np.zeros((2, 2, 2))
    Hbar[0] = [[0.0, 1.0], [0.0, 0.0]]
    p = StableParametrization(np.array([[0.0, 1.0], [0.0, 0.0]]), np.diag([1.0, math.sqrt(2)]),
                              Hbar, np.ones((2, 1)), eps=0.0)
    sys, ref = learn.materialize(p), models.example_one()
    np.testing.assert_allclose(sys.A, ref.A, atol=1e-15)
    np.testing.assert_allclose(sys.H, ref.H, atol=1e-15)
    np.testing.assert_array_equal(sys.B, ref.B)


@settings(max_examples=80)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**31))
def test_every_parametrization_is_certified(n, m, seed):
    p = random_params(np.random.default_rng(seed), n, m)
    sys = learn.materialize(p)
    cert = learn.certificate_of(p)
    assert cert.energy_violation <= 1e-13 * max(1.0, np.abs(sys.H).max())
    assert stability.is_hurwitz(sys.A)[0]
    assert stability.is_positive_definite(-(sys.A + sys.A.T) / 2)


@settings(max_examples=40)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_every_generalized_parametrization_is_certified(n, seed):
    p = random_params(np.random.default_rng(seed), n, 1, generalized=True, scale=0.5)
    cert = learn.certificate_of(p)
    assert cert.generalized


def test_vector_roundtrip():
    p = random_params(np.random.default_rng(0), 3, 2, generalized=True)
    q = p.with_vector(p.to_vector())
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)
    r = StableParametrization.from_dict(p.to_dict())
    np.testing.assert_array_equal(r.to_vector(), p.to_vector())


def test_zero_residual_loss():
    rng = np.random.default_rng(1)
    p = random_params(rng, 3, 1)
    sys = learn.materialize(p)
    data = dataset_from(sys, rng, k=400)
    l1 = np.abs(sys.H).sum()
    cfg = TrainConfig(l1_weight=1e-4)
    assert learn.loss(p, data, cfg) == pytest.approx(1e-4 * l1, rel=1e-6)
    assert learn.loss(p, data, TrainConfig(l1_weight=0.0)) <= 1e-9 * np.linalg.norm(data.Xdot)
    zero = StableParametrization(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3, 3)),
                                 np.zeros((3, 1)), eps=0.0)
    still = data.replace(Xdot=np.zeros_like(data.Xdot))
    assert learn.loss(zero, still, cfg) == 0.0


def finite_difference(p, data, cfg, h=1e-6):
    theta = p.to_vector()
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (learn.loss(p.with_vector(theta + e), data, cfg)
                - learn.loss(p.with_vector(theta - e), data, cfg)) / (2 * h)
    return g


@pytest.mark.parametrize("generalized", [False, True])
def test_gradient_matches_finite_differences(generalized):
    rng = np.random.default_rng(2)
    cfg = TrainConfig(l1_weight=1e-4)
    for _ in range(10):
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        truth = learn.materialize(random_params(rng, n, m))
        data = dataset_from(truth, rng, k=int(rng.choice([15, 200])))
        p = random_params(rng, n, m, generalized=generalized, scale=0.5)
        g = learn.gradient(p, data, cfg).to_vector()
        fd = finite_difference(p, data, cfg)
        floor = 1e-3 * np.abs(g).max()
        assert np.all(np.abs(g - fd) <= 1e-4 * np.abs(fd) + floor)


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_residual_is_homogeneous(n, seed, c):
    rng = np.random.default_rng(seed)
    truth = learn.materialize(random_params(rng, n, 1))
    data = dataset_from(truth, rng, k=30)
    p = random_params(rng, n, 1)
    cfg = TrainConfig(l1_weight=0.0)
    base = learn.loss(p, data, cfg)
    # scaling Xdot and every operator by c scales the residual by c
    sys = learn.materialize(p)
    O = np.hstack([sys.A, sys.H, sys.B])
    D = np.vstack([data.X, np.einsum("ik,jk->ijk", data.X, data.X).reshape(n * n, -1), data.U])
    assert np.linalg.norm(c * data.Xdot - c * O @ D) == pytest.approx(c * base, rel=1e-9)


def test_cyclic_lr_schedule():
    cfg = TrainConfig()
    assert learn.cyclic_lr(0, cfg) == pytest.approx(1e-6)
    assert learn.cyclic_lr(1000, cfg) == pytest.approx(1e-2)
    assert learn.cyclic_lr(2000, cfg) == pytest.approx(1e-6)
    assert learn.cyclic_lr(500, cfg) == pytest.approx(1e-6 + 0.5 * (1e-2 - 1e-6))
    lrs = [learn.cyclic_lr(s, cfg) for s in range(12000)]
    assert min(lrs) >= 1e-6 and max(lrs) <= 1e-2


def test_adam_first_step_is_signed_lr():
    opt = learn.Adam(3)
    theta = opt.step(np.zeros(3), np.array([2.0, -0.5, 0.0]), 0.1)
    np.testing.assert_allclose(theta, [-0.1, 0.1, 0.0], rtol=1e-6)


def example_dataset(k=300, seed=0):
    rng = np.random.default_rng(seed)
    return dataset_from(models.example_one(), rng, k=k)


def test_fit_is_deterministic_and_updates_zero_returns_init():
    data = example_dataset()
    cfg = TrainConfig(updates=200, seed=3)
    p1, h1 = learn.fit_stable(data, cfg=cfg)
    p2, h2 = learn.fit_stable(data, cfg=cfg)
    np.testing.assert_array_equal(p1.to_vector(), p2.to_vector())
    np.testing.assert_array_equal(h1, h2)
    p0, h0 = learn.fit_stable(data, cfg=TrainConfig(updates=0, seed=3))
    init = learn.init_parametrization(2, 1, std=0.1, seed=3)
    np.testing.assert_array_equal(p0.to_vector(), init.to_vector())
    assert h0.shape == (1,)


def test_fit_decreases_loss():
    data = example_dataset()
    p, history = learn.fit_stable(data, cfg=TrainConfig(updates=100))
    assert history.size == 101
    assert learn.loss(p, data) < history[0]
    assert learn.loss(p, data) == pytest.approx(history.min())


def test_fit_shape_mismatch():
    with pytest.raises(ValueError):
        learn.fit_stable(example_dataset(), n=3, cfg=TrainConfig(updates=1))


def test_generalized_fit_is_certified():
    data = example_dataset()
    p, history = learn.fit_stable_generalized(data, cfg=TrainConfig(updates=500))
    assert p.generalized and history[-1] < history[0]
    assert learn.certificate_of(p).generalized


def test_baseline_recovers_truth():
    sys = models.example_one()
    fit = learn.fit_baseline(example_dataset())
    np.testing.assert_allclose(fit.A, sys.A, atol=1e-10)
    np.testing.assert_allclose(fit.B, sys.B, atol=1e-10)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=2)
        np.testing.assert_allclose(fit.H @ np.kron(x, x), sys.H @ np.kron(x, x), atol=1e-10)


def test_baseline_zero_derivatives_and_warning():
    data = example_dataset()
    fit = learn.fit_baseline(data.replace(Xdot=np.zeros_like(data.Xdot)))
    assert np.all(fit.A == 0) and np.all(fit.H == 0) and np.all(fit.B == 0)
    short = SnapshotDataset(data.X[:, :3], data.U[:, :3], data.t[:3], data.Xdot[:, :3])
    with pytest.warns(RuntimeWarning):
        learn.fit_baseline(short)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        learn.fit_baseline(data)
    with pytest.raises(ValueError):
        learn.fit_baseline(data, ridge=-1.0)


def test_model_persistence(tmp_path):
    p = random_params(np.random.default_rng(4), 2, 1, generalized=True)
    sys = learn.materialize(p)
    learn.save_model(tmp_path / "m.json", sys, "generalized", p, certificate={"certified": True})
    sys2, p2, doc = learn.load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(sys2.A, sys.A)
    np.testing.assert_array_equal(p2.to_vector(), p.to_vector())
    assert doc["kind"] == "generalized"


def test_baseline_degenerate_regressors():
    data = example_dataset()
    zero = learn.fit_baseline(data.replace(Xdot=np.zeros_like(data.Xdot)), ridge=1e-3)
    assert np.all(zero.A == 0) and np.all(zero.H == 0) and np.all(zero.B == 0)
    X = np.repeat(data.X[:, :4], 3, axis=1)
    U = np.repeat(data.U[:, :4], 3, axis=1)
    dup = SnapshotDataset(X, U, np.arange(12.0), models.example_one()(X, U))
    with pytest.warns(RuntimeWarning):
        fit = learn.fit_baseline(dup, ridge=1e-8)
    assert all(np.all(np.isfinite(M)) for M in (fit.A, fit.H, fit.B))


def test_generalized_fit_recovers_generalized_system():
    rng = np.random.default_rng(12)
    p_true = StableParametrization(0.5 * rng.normal(size=(2, 2)), np.eye(2) + 0.2 * rng.normal(size=(2, 2)),
                                   0.3 * rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 1)),
                                   Qbar=np.eye(2) + 0.3 * rng.normal(size=(2, 2)))
    truth = learn.materialize(p_true)
    t = np.linspace(0, 10, 200)
    # stronger inputs than the default family so the quadratic term is excited
    signals = [s.scaled(3.0) for s in models.sample_training_signals("example2d", 4, 0)]
    parts = []
    for s in signals:
        X = models.simulate(truth, np.zeros(2), s, t)
        U = s(t)[None, :]
        parts.append(SnapshotDataset(X, U, t, truth(X, U)))
    p, _ = learn.fit_stable_generalized(dataprep.stack_datasets(parts))
    model = learn.materialize(p)
    learn.certificate_of(p)
    for u in (models.fixed_test_signals()["u1"], models.fixed_test_signals()["u2"]):
        X_true = models.simulate(truth, np.zeros(2), u, t)
        X_fit = models.simulate(model, np.zeros(2), u, t)
        assert np.linalg.norm(X_fit - X_true) / np.linalg.norm(X_true) <= 0.05
