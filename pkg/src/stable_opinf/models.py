"""Quadratic control systems, their simulation, benchmarks and input signals."""

__all__ = [
    "SignalTerm",
    "SignalSpec",
    "QuadraticControlSystem",
    "BurgersConfig",
    "SimulationDiverged",
    "DIVERGENCE_THRESHOLD",
    "rhs",
    "simulate",
    "simulate_batch",
    "choose_substeps",
    "example_one",
    "example_two",
    "burgers_semidiscrete",
    "sample_training_signals",
    "fixed_test_signals",
    "SIGNAL_FAMILIES",
]

import dataclasses
import functools
import math
from typing import NamedTuple

import numpy as np
import scipy.sparse as sparse

from .tensor_ops import as_matrix, make_quadratic_action, spectral_norm

DIVERGENCE_THRESHOLD = 1e12
SIGNAL_FAMILIES = ("example2d", "burgers_train", "burgers_test")


# Input signals ===============================================================
class SignalTerm(NamedTuple):
    kind: str          # "sin" or "cos"
    frequency: float
    decay: float
    amplitude: float = 1.0


@dataclasses.dataclass(frozen=True)
class SignalSpec:
    """Scalar input ``u(t) = sum amplitude * kind(frequency t) * exp(-decay t)``."""

    terms: tuple

    def __post_init__(self):
        terms = tuple(SignalTerm(*t) for t in self.terms)
        for term in terms:
            if term.kind not in ("sin", "cos"):
                raise ValueError(f"unknown signal kind {term.kind!r}")
            if not all(math.isfinite(v) for v in term[1:]):
                raise ValueError("signal parameters must be finite")
        object.__setattr__(self, "terms", terms)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for kind, freq, decay, amp in self.terms:
            wave = np.sin(freq * t) if kind == "sin" else np.cos(freq * t)
            out = out + amp * wave * np.exp(-decay * t)
        return out

    def sup_bound(self):
        """Upper bound on ``|u(t)|`` over ``t >= 0`` (inf if any term grows)."""
        if any(term.decay < 0 for term in self.terms):
            return math.inf
        return float(sum(abs(term.amplitude) for term in self.terms))

    def scaled(self, factor):
        return SignalSpec(tuple(t._replace(amplitude=factor * t.amplitude)
                                for t in self.terms))

    def to_dict(self):
        return {"terms": [t._asdict() for t in self.terms]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(SignalTerm(**t) for t in d["terms"]))


# Systems =====================================================================
@dataclasses.dataclass(frozen=True, eq=False)
class QuadraticControlSystem:
    """``dx/dt = A x + H (x ⊗ x) + B u`` with ``H`` of shape (n, n**2).

    ``H`` may be a ``scipy.sparse`` matrix; ``A`` and ``B`` are dense.
    """

    A: np.ndarray
    H: object
    B: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if sparse.issparse(self.H):
            H = sparse.csr_matrix(self.H, dtype=float)
            if not np.all(np.isfinite(H.data)):
                raise ValueError("H contains non-finite entries")
        else:
            H = as_matrix(self.H, "H")
        if H.shape != (n, n * n):
            raise ValueError(f"H must have shape {(n, n * n)}, got {H.shape}")
        B = as_matrix(self.B, "B")
        if B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {B.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "B", B)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def H_dense(self):
        return self.H.toarray() if sparse.issparse(self.H) else self.H

    @functools.cached_property
    def quadratic(self):
        """Callable evaluating ``H (x ⊗ x)`` column-wise."""
        return make_quadratic_action(self.H)

    def __call__(self, X, U):
        """Right-hand side for states ``X`` (n,) or (n, k) and inputs ``U``."""
        return self.A @ X + self.quadratic(X) + self.B @ U


def rhs(sys, x, u):
    """Evaluate ``A x + H (x ⊗ x) + B u`` for a single state and input."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if x.shape != (sys.n,):
        raise ValueError(f"x has length {x.size}, expected {sys.n}")
    if u.shape != (sys.m,):
        raise ValueError(f"u has length {u.size}, expected {sys.m}")
    return sys(x, u)


# Time integration ============================================================
class SimulationDiverged(RuntimeError):
    """Raised when a state norm exceeds the divergence threshold."""

    def __init__(self, time, trajectory=None):
        super().__init__(f"simulation diverged at t = {time:.6g}")
        self.time = time
        self.trajectory = trajectory


def choose_substeps(sys, t_grid, minimum=10, max_step=0.01, state_scale=0.0):
    """RK4 substeps per sample interval.

    At least ``minimum`` per interval, substeps no longer than ``max_step``,
    and more if the problem is stiff: the classical RK4 stability interval on
    the negative real axis is about 2.78, so ``h * rho`` is kept below 2.
    ``rho`` is the spectral radius of ``A`` plus ``2 |H|_2 state_scale``, the
    Jacobian contribution of the quadratic term at states of that size.
    """
    dt = float(np.max(np.diff(t_grid))) if len(t_grid) > 1 else 0.0
    if dt == 0.0:
        return minimum
    rho = float(np.max(np.abs(np.linalg.eigvals(sys.A))))
    if state_scale > 0:
        rho += 2.0 * spectral_norm(sys.H) * state_scale
    return max(minimum, int(math.ceil(dt / max_step)), int(math.ceil(dt * rho / 2.0)))


def _input_table(u, m, times):
    """Evaluate an input description at ``times``; returns (m, len(times))."""
    if u is None:
        return np.zeros((m, times.size))
    if isinstance(u, SignalSpec):
        u = [u]
    if isinstance(u, np.ndarray):
        raise TypeError("sampled inputs must be passed as (t_samples, values)")
    if isinstance(u, tuple) and len(u) == 2 and isinstance(u[1], np.ndarray):
        ts, vals = np.asarray(u[0], dtype=float), np.atleast_2d(u[1])
        if vals.shape[0] != m:
            raise ValueError(f"sampled input has {vals.shape[0]} channels, expected {m}")
        return np.vstack([np.interp(times, ts, row) for row in vals])
    if callable(u):
        return np.column_stack([np.atleast_1d(u(t)) for t in times]).reshape((m, -1))
    u = list(u)
    if len(u) != m or not all(isinstance(s, SignalSpec) for s in u):
        raise ValueError(f"expected {m} SignalSpec channels")
    return np.vstack([s(times) for s in u])


def simulate_batch(sys, x0, inputs, t_grid, substeps=None):
    """Integrate ``sys`` from ``x0`` under each input in ``inputs`` at once.

    Parameters
    ----------
    sys : QuadraticControlSystem
    x0 : (n,) or (n, k) array
        Initial condition, shared or one column per input.
    inputs : sequence
        One input description per trajectory: ``None`` (zero input), a
        ``SignalSpec``, a list of ``m`` SignalSpecs, a callable ``u(t)``, or
        a ``(t_samples, values)`` pair interpolated linearly.
    t_grid : (T,) array
        Strictly increasing output times.
    substeps : int, optional
        Fixed RK4 substeps per sample interval. Defaults to
        :func:`choose_substeps`.

    Returns
    -------
    trajectories : (k, n, T) ndarray
        NaN after a trajectory diverges.
    blowup_times : list of float or None
    """
    t_grid = np.asarray(t_grid, dtype=float).ravel()
    if t_grid.size < 1 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    k = len(inputs)
    n, m = sys.n, sys.m
    X = np.array(x0, dtype=float).reshape((n, -1))
    if not np.all(np.isfinite(X)):
        raise ValueError("x0 must be finite")
    if X.shape[1] == 1:
        X = np.repeat(X, k, axis=1)
    if X.shape[1] != k:
        raise ValueError("x0 must have one column or one per input")
    if substeps is None:
        substeps = choose_substeps(sys, t_grid)
    if substeps < 1:
        raise ValueError("substeps must be positive")

    # Inputs at every RK4 stage time: 2*substeps half-steps per interval.
    T = t_grid.size
    frac = np.arange(2 * substeps) / (2 * substeps)
    dts = np.diff(t_grid)
    stage_times = np.concatenate([(t_grid[:-1, None] + dts[:, None] * frac).ravel(),
                                  t_grid[-1:]])
    table = np.stack([_input_table(u, m, stage_times) for u in inputs], axis=1)

    A, B, quad = sys.A, sys.B, sys.quadratic.unchecked
    span = 2 * substeps + 1

    def f(Z, F):
        return A @ Z + quad(Z) + F

    # max |x_i| below this cannot put the norm over the threshold
    fast_ok = DIVERGENCE_THRESHOLD / math.sqrt(n)
    out = np.full((k, n, T), np.nan)
    out[:, :, 0] = X.T
    blowup = [None] * k
    alive = np.ones(k, dtype=bool)
    idx = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(T - 1):
            h = dts[step] / substeps
            t0 = t_grid[step]
            # forcing B u at the stage times of this interval, (n, k, span)
            forcing = np.einsum("ij,jks->iks", B, table[:, :, idx:idx + span])
            for s in range(substeps):
                j0 = 2 * s
                F0, Fh, F1 = forcing[:, :, j0], forcing[:, :, j0 + 1], forcing[:, :, j0 + 2]
                k1 = f(X, F0)
                k2 = f(X + 0.5 * h * k1, Fh)
                k3 = f(X + 0.5 * h * k2, Fh)
                k4 = f(X + h * k3, F1)
                X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                idx += 2
                if np.abs(X).max() <= fast_ok:
                    continue
                norms = np.sqrt(np.sum(X * X, axis=0))
                bad = alive & ~(norms <= DIVERGENCE_THRESHOLD)
                if np.any(bad):
                    t_now = t0 + (s + 1) * h
                    for j in np.flatnonzero(bad):
                        blowup[j] = float(t_now)
                    alive &= ~bad
                    X[:, bad] = 0.0
                    if not np.any(alive):
                        return out, blowup
            out[alive, :, step + 1] = X[:, alive].T
    return out, blowup


def simulate(sys, x0, u, t_grid, substeps=None):
    """Integrate a single trajectory with fixed-substep classical RK4.

    Returns the (n, len(t_grid)) state matrix; column 0 is ``x0``. Raises
    :class:`SimulationDiverged` if the state norm exceeds 1e12.
    """
    traj, blowup = simulate_batch(sys, x0, [u], t_grid, substeps)
    if blowup[0] is not None:
        raise SimulationDiverged(blowup[0], traj[0])
    return traj[0]


# Benchmark systems ===========================================================
def example_one():
    A = np.array([[-1.0, 1.0], [-1.0, -2.0]])
    H = np.array([[0.0, 1.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]])
    B = np.array([[1.0], [1.0]])
    return QuadraticControlSystem(A, H, B)


def example_two():
    sys = example_one()
    return QuadraticControlSystem(0.01 * sys.A, sys.H, sys.B)


@dataclasses.dataclass(frozen=True)
class BurgersConfig:
    N: int = 251
    L: float = 2.0
    mu: float = 0.05

    def __post_init__(self):
        if self.N < 3 or self.mu <= 0 or self.L <= 0:
            raise ValueError("need N >= 3, mu > 0, L > 0")

    @property
    def dx(self):
        return self.L / (self.N - 1)

    @property
    def interior(self):
        return np.arange(1, self.N - 1) * self.dx

    def forcing_profile(self):
        return np.cos((self.interior / self.L - 1.0) * np.pi / 2.0)


def burgers_semidiscrete(cfg=BurgersConfig()):
    """Finite-difference viscous Burgers' model with zero Dirichlet ends.

    The state holds the N-2 interior nodes. Convection uses the skew
    (one-third) splitting ``v v_x ~ (v D v + D(v^2)) / 3`` with the central
    difference ``D``; since ``D`` is skew-symmetric under zero boundary
    values, the resulting ``H`` is exactly energy preserving.
    """
    n = cfg.N - 2
    dx = cfg.dx
    lap = sparse.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1])
    A = (cfg.mu / dx**2) * lap.toarray()

    c = 1.0 / (6.0 * dx)
    rows, cols, vals = [], [], []
    for p in range(n):
        if p + 1 < n:
            # -(v_p v_{p+1} + v_{p+1}^2) / (6 dx)
            rows += [p, p]
            cols += [p * n + p + 1, (p + 1) * n + p + 1]
            vals += [-c, -c]
        if p - 1 >= 0:
            # +(v_p v_{p-1} + v_{p-1}^2) / (6 dx)
            rows += [p, p]
            cols += [p * n + p - 1, (p - 1) * n + p - 1]
            vals += [c, c]
    H = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n * n))
    from .stability import energy_preserving_check    # stability imports this module

    check = energy_preserving_check(H, tol=1e-12 * c)
    if not check.passed:
        raise AssertionError(f"assembled convection is not energy preserving ({check.violation:.3e})")
    B = cfg.forcing_profile().reshape((-1, 1))
    return QuadraticControlSystem(A, H, B)


# Signal families =============================================================
def _draw_signal(family, rng):
    if family == "example2d":
        f1, f2 = rng.integers(0, 6, size=2)
        g1, g2 = rng.uniform(0.0, 0.5, size=2)
        return SignalSpec((("sin", float(f1), float(f2), 1.0),
                           ("sin", float(g1), float(g2), 1.0)))
    nterms = 2 if family == "burgers_train" else 3
    # N(0, 2) read as variance 2
    f = rng.normal(0.0, math.sqrt(2.0), size=nterms)
    g = rng.uniform(0.1, 1.1, size=nterms)
    kinds = ("sin", "sin", "cos")[:nterms]
    return SignalSpec(tuple((kind, float(fi), float(gi), 1.0)
                            for kind, fi, gi in zip(kinds, f, g)))


def sample_training_signals(family, count, seed):
    """Draw ``count`` random signals of a named family.

    Each signal gets its own PCG64 stream spawned from ``SeedSequence(seed)``,
    so signal ``i`` does not depend on ``count``.
    """
    if family not in SIGNAL_FAMILIES:
        raise ValueError(f"family must be one of {SIGNAL_FAMILIES}")
    if count < 0:
        raise ValueError("count must be nonnegative")
    children = np.random.SeedSequence(seed).spawn(count)
    return [_draw_signal(family, np.random.default_rng(child)) for child in children]


def fixed_test_signals():
    """The four fixed test inputs of the low-dimensional examples."""
    u1 = SignalSpec((("sin", 1.0, 0.2, 1.0),
                     ("sin", 2.0, 0.6, 1.0),
                     ("cos", 3.0, 1.0, 1.0)))
    u2 = SignalSpec((("sin", 2.0, 0.1, -1.0),
                     ("sin", 1.0, 0.3, -1.0),
                     ("cos", 4.0, 0.5, 1.0)))
    return {"u1": u1, "u2": u2, "w1": u1.scaled(10.0), "w2": u2.scaled(10.0)}
