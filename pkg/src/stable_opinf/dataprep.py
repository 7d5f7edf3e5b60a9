"""Snapshot assembly, POD, derivative estimation, noise and persistence."""

__all__ = [
    "SnapshotDataset",
    "PodBasis",
    "pod_fit",
    "pod_project",
    "pod_lift",
    "estimate_derivatives",
    "exact_derivatives",
    "add_noise",
    "assemble_regressor",
    "stack_datasets",
    "write_csv",
    "read_csv",
    "write_binary",
    "read_binary",
]

import dataclasses
import pathlib
from typing import Optional

import numpy as np

from .tensor_ops import as_matrix, columnwise_self_kron, compact_self_kron, thin_svd

BINARY_MAGIC = "SOPF1"


# Datasets ====================================================================
@dataclasses.dataclass(eq=False)
class SnapshotDataset:
    """States ``X`` (n, k), inputs ``U`` (m, k), optional derivatives ``Xdot``.

    ``segments`` lists the lengths of the trajectories concatenated into the
    columns; ``t`` must be strictly increasing inside each segment.
    """

    X: np.ndarray
    U: np.ndarray
    t: np.ndarray
    Xdot: Optional[np.ndarray] = None
    segments: Optional[tuple] = None
    provenance: str = ""

    def __post_init__(self):
        self.X = as_matrix(self.X, "X")
        self.U = as_matrix(self.U, "U")
        self.t = np.asarray(self.t, dtype=float).ravel()
        k = self.X.shape[1]
        if self.U.shape[1] != k or self.t.size != k:
            raise ValueError("X, U and t must have the same number of columns")
        if self.Xdot is not None:
            self.Xdot = as_matrix(self.Xdot, "Xdot")
            if self.Xdot.shape != self.X.shape:
                raise ValueError("Xdot must have the shape of X")
        if self.segments is None:
            self.segments = (k,)
        self.segments = tuple(int(s) for s in self.segments)
        if sum(self.segments) != k:
            raise ValueError("segment lengths must add up to the column count")
        for seg in self.segment_slices():
            if np.any(np.diff(self.t[seg]) <= 0):
                raise ValueError("t must be strictly increasing within each segment")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.U.shape[0]

    def segment_slices(self):
        start = 0
        for length in self.segments:
            yield slice(start, start + length)
            start += length

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def stack_datasets(datasets):
    """Concatenate datasets column-wise, keeping trajectory boundaries."""
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    have_dot = [d.Xdot is not None for d in datasets]
    if any(have_dot) and not all(have_dot):
        raise ValueError("either all or none of the datasets must carry Xdot")
    return SnapshotDataset(
        X=np.hstack([d.X for d in datasets]),
        U=np.hstack([d.U for d in datasets]),
        t=np.concatenate([d.t for d in datasets]),
        Xdot=np.hstack([d.Xdot for d in datasets]) if all(have_dot) else None,
        segments=tuple(s for d in datasets for s in d.segments),
        provenance="; ".join(d.provenance for d in datasets if d.provenance),
    )


# POD =========================================================================
@dataclasses.dataclass(frozen=True, eq=False)
class PodBasis:
    V: np.ndarray
    singular_values: np.ndarray

    @property
    def rank(self):
        return self.V.shape[1]

    @property
    def retained_energy(self):
        s2 = self.singular_values**2
        total = s2.sum()
        return float(s2[:self.rank].sum() / total) if total > 0 else 1.0

    def energy_curve(self):
        """Retained energy for every candidate rank 1, 2, ..."""
        s2 = self.singular_values**2
        total = s2.sum()
        return np.cumsum(s2) / total if total > 0 else np.ones_like(s2)


def pod_fit(Y, rank=None, energy=None):
    """Leading left singular vectors of the snapshot matrix ``Y``.

    Exactly one of ``rank`` (number of vectors) or ``energy`` (smallest rank
    whose retained energy reaches the threshold) must be given.
    """
    if (rank is None) == (energy is None):
        raise ValueError("give exactly one of rank or energy")
    Y = as_matrix(Y, "Y")
    Phi, sigma, _ = thin_svd(Y)
    if rank is not None:
        if not 1 <= rank <= min(Y.shape):
            raise ValueError(f"rank must be in [1, {min(Y.shape)}], got {rank}")
    else:
        if not 0 < energy <= 1:
            raise ValueError("energy threshold must be in (0, 1]")
        s2 = sigma**2
        total = s2.sum()
        if total == 0:
            rank = 1
        else:
            curve = np.cumsum(s2) / total
            # guard the final entry against rounding below 1
            curve[-1] = 1.0
            rank = int(np.searchsorted(curve, energy * (1 - 1e-15)) + 1)
    return PodBasis(V=Phi[:, :rank].copy(), singular_values=sigma)


def pod_project(basis, Y):
    """Reduced coordinates ``V^T Y``."""
    Y = np.asarray(Y, dtype=float)
    if Y.shape[0] != basis.V.shape[0]:
        raise ValueError(f"Y has {Y.shape[0]} rows, basis expects {basis.V.shape[0]}")
    return basis.V.T @ Y


def pod_lift(basis, X):
    """Full-space reconstruction ``V X``."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] != basis.rank:
        raise ValueError(f"X has {X.shape[0]} rows, basis has rank {basis.rank}")
    return basis.V @ X


# Derivatives =================================================================
# 5-point, 4th-order stencils; row p gives weights for samples 0..4 when
# differentiating at sample p (p = 2 is the central stencil).
_STENCILS = np.array([
    [-25.0, 48.0, -36.0, 16.0, -3.0],
    [-3.0, -10.0, 18.0, -6.0, 1.0],
    [1.0, -8.0, 0.0, 8.0, -1.0],
    [-1.0, 6.0, -18.0, 10.0, 3.0],
    [3.0, -16.0, 36.0, -48.0, 25.0],
]) / 12.0


def estimate_derivatives(X, dt, t=None):
    """Fourth-order finite-difference time derivatives of the columns of ``X``.

    Interior samples use the central stencil ``(1, -8, 0, 8, -1) / (12 dt)``;
    the first and last two samples use one-sided 5-point stencils.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape((1, -1))
    k = X.shape[1]
    if k < 5:
        raise ValueError("need at least 5 samples")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t is not None:
        steps = np.diff(np.asarray(t, dtype=float))
        if not np.allclose(steps, dt, rtol=1e-9, atol=0):
            raise ValueError("derivative estimation requires a uniform grid")
    D = np.empty_like(X)
    D[:, 2:-2] = (X[:, :-4] - 8 * X[:, 1:-3] + 8 * X[:, 3:-1] - X[:, 4:]) / 12.0
    D[:, :2] = X[:, :5] @ _STENCILS[:2].T
    D[:, -2:] = X[:, -5:] @ _STENCILS[3:].T
    return D / dt


def exact_derivatives(sys, X, U):
    """Evaluate the model right-hand side at every snapshot."""
    return sys(np.asarray(X, dtype=float), np.asarray(U, dtype=float))


def add_noise(X, sigma, seed):
    """Add i.i.d. ``N(0, sigma^2)`` noise to every entry of ``X``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    X = np.asarray(X, dtype=float)
    if sigma == 0:
        return X.copy()
    rng = np.random.default_rng(seed)
    return X + sigma * rng.standard_normal(X.shape)


# Regression matrix ===========================================================
def assemble_regressor(X, U):
    """Stack ``D = [X; X ⊗̃ X; U]`` and report its conditioning.

    Returns ``(D, cond)``. The full Kronecker block repeats every product
    ``x_i x_j`` (i != j) twice, so ``cond`` is computed on the non-redundant
    regressor ``[X; x_i x_j (i <= j); U]``; it is ``inf`` when that matrix is
    rank deficient.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.shape[1] != U.shape[1]:
        raise ValueError("X and U must have the same number of columns")
    D = np.vstack([X, columnwise_self_kron(X), U])
    Dc = np.vstack([X, compact_self_kron(X), U])
    sv = np.linalg.svd(Dc, compute_uv=False)
    full_rank = Dc.shape[0] <= Dc.shape[1]
    if not full_rank or sv[-1] == 0 or sv[-1] <= sv[0] * np.finfo(float).eps:
        cond = float("inf")
    else:
        cond = float(sv[0] / sv[-1])
    return D, cond


# Files =======================================================================
def write_csv(path, t, values, prefix="x"):
    """Write ``t`` and the rows of ``values`` as columns with a header row."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    header = ",".join(["t"] + [f"{prefix}_{i + 1}" for i in range(values.shape[0])])
    data = np.column_stack([np.asarray(t, dtype=float), values.T])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def read_csv(path):
    """Return ``(t, values, names)`` with ``values`` of shape (vars, samples)."""
    path = pathlib.Path(path)
    with path.open() as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if names[0] != "t":
        raise ValueError(f"{path}: first column must be 't'")
    return data[:, 0], data[:, 1:].T, names[1:]


def write_binary(path, M):
    """Raw little-endian float64 matrix behind a ``SOPF1 rows cols`` header."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "wb") as fh:
        fh.write(f"{BINARY_MAGIC} {M.shape[0]} {M.shape[1]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(M, dtype="<f8").tobytes())


def read_binary(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 3 or header[0] != BINARY_MAGIC:
            raise ValueError(f"{path}: not a {BINARY_MAGIC} file")
        rows, cols = int(header[1]), int(header[2])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape((rows, cols)).astype(float)
