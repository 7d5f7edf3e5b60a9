import math

import numpy as np
import pytest
from scipy.linalg import expm

from stable_opinf import models, stability
from stable_opinf.models import QuadraticControlSystem, SignalSpec


def test_rhs_example_one():
    sys = models.example_one()
    np.testing.assert_array_equal(sys.A @ [1, 2], [1, -5])
    np.testing.assert_array_equal(models.rhs(sys, [1, 2], [0]), [3, -6])
    np.testing.assert_array_equal(models.rhs(sys, [0, 0], [0]), [0, 0])


def test_rhs_linear_case_and_dimension_errors():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    sys = QuadraticControlSystem(A, np.zeros((3, 9)), np.zeros((3, 1)))
    x = rng.normal(size=3)
    np.testing.assert_allclose(models.rhs(sys, x, [5.0]), A @ x)
    with pytest.raises(ValueError):
        models.rhs(sys, [1.0, 2.0], [0.0])
    with pytest.raises(ValueError):
        QuadraticControlSystem(A, np.zeros((3, 4)), np.zeros((3, 1)))


def test_benchmark_matrices():
    one, two = models.example_one(), models.example_two()
    assert one.A[0, 1] == 1
    np.testing.assert_array_equal(two.A, 0.01 * one.A)
    np.testing.assert_array_equal(two.H, one.H)
    np.testing.assert_array_equal(two.B, one.B)
    assert stability.energy_preserving_check(one.H).passed


def test_simulate_equilibrium():
    X = models.simulate(models.example_one(), [0, 0], None, np.linspace(0, 5, 11))
    np.testing.assert_array_equal(X, 0.0)


def test_simulate_exponential_decay():
    sys = QuadraticControlSystem([[-1.0]], [[0.0]], [[0.0]])
    X = models.simulate(sys, [1.0], None, [0.0, 1.0])
    assert X[0, 0] == 1.0
    assert X[0, 1] == pytest.approx(math.exp(-1), abs=1e-8)


def test_simulate_linear_forced_against_matrix_exponential():
    # x' = A x + B, constant input: x(t) = expm(A t) x0 + A^{-1}(expm(A t) - I) B
    A = np.array([[-1.0, 2.0], [-2.0, -0.5]])
    B = np.array([[1.0], [0.5]])
    sys = QuadraticControlSystem(A, np.zeros((2, 4)), B)
    x0 = np.array([1.0, -1.0])
    t = np.linspace(0, 3, 31)
    X = models.simulate(sys, x0, lambda s: np.array([1.0]), t)
    for k, tk in enumerate(t):
        E = expm(A * tk)
        exact = E @ x0 + np.linalg.solve(A, (E - np.eye(2)) @ B[:, 0])
        np.testing.assert_allclose(X[:, k], exact, atol=1e-9)


def test_simulate_example_one_bounded_by_trapping_radius():
    sys = models.example_one()
    u1 = models.fixed_test_signals()["u1"]
    X = models.simulate(sys, np.zeros(2), u1, np.linspace(0, 10, 200))
    r = stability.trapping_radius(sys, u1.sup_bound())
    assert np.linalg.norm(X, axis=0).max() <= r + 1e-6


def test_simulate_substep_convergence():
    sys = models.example_one()
    t = np.linspace(0, 10, 200)
    for name in ("u1", "u2"):
        u = models.fixed_test_signals()[name]
        a = models.simulate(sys, np.zeros(2), u, t, substeps=10)[:, -1]
        b = models.simulate(sys, np.zeros(2), u, t, substeps=20)[:, -1]
        assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(b)


def test_simulate_is_deterministic():
    sys = models.example_one()
    t = np.linspace(0, 10, 200)
    u = models.fixed_test_signals()["w2"]
    np.testing.assert_array_equal(models.simulate(sys, [0.3, 0.1], u, t),
                                  models.simulate(sys, [0.3, 0.1], u, t))


def test_simulate_reports_divergence():
    # x' = x^2 blows up at t = 1 from x0 = 1
    sys = QuadraticControlSystem([[0.0]], [[1.0]], [[0.0]])
    with pytest.raises(models.SimulationDiverged) as info:
        models.simulate(sys, [1.0], None, np.linspace(0, 2, 21))
    assert 0.99 <= info.value.time <= 1.01


def test_simulate_batch_marks_only_diverged_columns():
    sys = QuadraticControlSystem([[0.0]], [[1.0]], [[1.0]])
    t = np.linspace(0, 2, 21)
    up = SignalSpec((("cos", 0.0, 0.0, 5.0),))
    down = SignalSpec((("cos", 0.0, 0.0, -0.01),))
    traj, blow = models.simulate_batch(sys, [0.0], [up, down], t)
    assert blow[0] is not None and blow[1] is None
    assert np.all(np.isfinite(traj[1]))
    assert np.isnan(traj[0, 0, -1])


def test_simulate_rejects_bad_grid():
    with pytest.raises(ValueError):
        models.simulate(models.example_one(), [0, 0], None, [0.0, 1.0, 1.0])


def test_sampled_input_matches_signal():
    sys = models.example_one()
    u = models.fixed_test_signals()["u1"]
    t = np.linspace(0, 5, 101)
    fine = np.linspace(0, 5, 5001)
    a = models.simulate(sys, [0, 0], u, t)
    b = models.simulate(sys, [0, 0], (fine, u(fine)[None, :]), t)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_burgers_structure():
    cfg = models.BurgersConfig()
    sys = models.burgers_semidiscrete(cfg)
    assert (sys.n, sys.m) == (249, 1)
    np.testing.assert_array_equal(sys.A, sys.A.T)
    assert np.linalg.eigvalsh(sys.A).max() < 0
    check = stability.energy_preserving_check(sys.H)
    assert check.passed and check.violation <= 1e-12
    np.testing.assert_allclose(sys.B[:, 0], np.cos((cfg.interior / 2 - 1) * np.pi / 2))


def test_burgers_quadratic_term_approximates_convection():
    cfg = models.BurgersConfig(N=401)
    sys = models.burgers_semidiscrete(cfg)
    xi = cfg.interior
    v = np.sin(np.pi * xi / cfg.L)
    conv = sys.quadratic(v)
    exact = -v * (np.pi / cfg.L) * np.cos(np.pi * xi / cfg.L)
    assert np.max(np.abs(conv - exact)[5:-5]) < 1e-4


def test_burgers_unforced_energy_decays():
    sys = models.burgers_semidiscrete(models.BurgersConfig(N=51))
    xi = models.BurgersConfig(N=51).interior
    x0 = 3.0 * np.sin(np.pi * xi) + np.sin(3 * np.pi * xi / 2)
    X = models.simulate(sys, x0, None, np.linspace(0, 2, 101))
    energy = 0.5 * np.sum(X**2, axis=0)
    assert np.all(np.diff(energy) <= 1e-12)


def test_signal_sampling_is_deterministic():
    for family in models.SIGNAL_FAMILIES:
        a = models.sample_training_signals(family, 5, 42)
        b = models.sample_training_signals(family, 5, 42)
        assert a == b
    assert models.sample_training_signals("burgers_train", 3, 1) != \
        models.sample_training_signals("burgers_train", 3, 2)


def test_signal_families_shapes():
    for s in models.sample_training_signals("burgers_test", 20, 0):
        assert len(s.terms) == 3 and [t.kind for t in s.terms] == ["sin", "sin", "cos"]
        assert all(0.1 <= t.decay <= 1.1 for t in s.terms)
    for s in models.sample_training_signals("burgers_train", 20, 0):
        assert len(s.terms) == 2
    for s in models.sample_training_signals("example2d", 200, 0):
        f1, f2 = s.terms[0].frequency, s.terms[0].decay
        assert f1 in range(6) and f2 in range(6)
        assert 0 <= s.terms[1].frequency <= 0.5 and 0 <= s.terms[1].decay <= 0.5


def test_signal_sampling_prefix_stable():
    short = models.sample_training_signals("burgers_test", 3, 7)
    long = models.sample_training_signals("burgers_test", 10, 7)
    assert long[:3] == short


def test_fixed_test_signals():
    sig = models.fixed_test_signals()
    assert sig["u1"](0.0) == pytest.approx(1.0)
    assert sig["u2"](0.0) == pytest.approx(1.0)
    assert sig["w1"](0.0) == pytest.approx(10.0)
    t = 1.3
    expected = -math.sin(2 * t) * math.exp(-0.1 * t) - math.sin(t) * math.exp(-0.3 * t) \
        + math.cos(4 * t) * math.exp(-0.5 * t)
    assert sig["u2"](t) == pytest.approx(expected, rel=1e-14)
    assert sig["w2"](t) == pytest.approx(10 * expected, rel=1e-14)
    assert sig["w1"].sup_bound() == 30.0


def test_signal_roundtrip():
    s = models.fixed_test_signals()["w2"]
    assert SignalSpec.from_dict(s.to_dict()) == s
