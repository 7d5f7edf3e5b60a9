"""Energy-preservation and stability checks, and bounded-input certificates.

A system ``dx/dt = A x + H (x ⊗ x) + B u`` is certified when ``A = J - R``
with ``J`` skew and ``R`` symmetric positive definite and ``H`` is energy
preserving. Then every trajectory under an input with ``|u(t)| <= u_bound``
enters and stays in the ball of radius ``|B|_2 u_bound / sigma_min(R)``,
and ``|x(t)|_2 <= max(|x0|_2, radius)``.
"""

__all__ = [
    "CertificationError",
    "EnergyCheck",
    "StabilityCertificate",
    "BibsReport",
    "energy_preserving_check",
    "energy_preserving_sample_check",
    "is_hurwitz",
    "is_positive_definite",
    "monotone_decompose",
    "certify",
    "trapping_radius",
    "verify_bibs",
    "to_skew_block_form",
    "blocks_to_H",
    "generalized_certificate",
    "certificate_report",
]

import dataclasses
import math
from typing import NamedTuple

import numpy as np
import scipy.sparse as sparse

from . import models
from .tensor_ops import (min_singular_value, quadratic_action, skew_part,
                         spectral_norm, sym_part)


class CertificationError(ValueError):
    """The hypotheses of the bounded-input bounded-state result do not hold."""


class EnergyCheck(NamedTuple):
    passed: bool
    violation: float


# Energy preservation =========================================================
def _triplets(H):
    """Nonzero entries of H as (i, j, k, value) with H_ijk = H[i, j*n + k]."""
    rows = H.shape[0]
    n = int(round(math.sqrt(H.shape[1])))
    if n * n != H.shape[1] or rows != n:
        raise ValueError(f"H must have shape (n, n**2), got {H.shape}")
    if sparse.issparse(H):
        coo = sparse.coo_matrix(H)
        i, col, val = coo.row, coo.col, coo.data
    else:
        H = np.asarray(H, dtype=float)
        i, col = np.nonzero(H)
        val = H[i, col]
    j, k = np.divmod(col, n)
    return n, i.astype(np.int64), j.astype(np.int64), k.astype(np.int64), val


def energy_preserving_check(H, tol=1e-12):
    """Check the index-permutation condition for an energy-preserving ``H``.

    For every index triple the sum of ``H_ijk`` over all six permutations of
    ``(i, j, k)`` must vanish. Entries are grouped by their sorted index
    triple; an entry whose triple has repeated indices appears in the
    six-term sum once per matching permutation (2 or 6 times).

    Returns
    -------
    EnergyCheck
        ``passed`` is True iff the largest absolute permutation sum is at
        most ``tol``; ``violation`` is that largest sum.
    """
    n, i, j, k, val = _triplets(H)
    if val.size == 0:
        return EnergyCheck(True, 0.0)
    idx = np.sort(np.stack([i, j, k]), axis=0)
    keys = (idx[0] * n + idx[1]) * n + idx[2]
    uniq, inverse = np.unique(keys, return_inverse=True)
    sums = np.bincount(inverse, weights=val, minlength=uniq.size)
    a, b, c = np.unravel_index(uniq, (n, n, n))
    mult = np.where((a == b) & (b == c), 6.0, np.where((a == b) | (b == c), 2.0, 1.0))
    violation = float(np.max(np.abs(mult * sums)))
    return EnergyCheck(violation <= tol, violation)


def energy_preserving_sample_check(H, trials=1000, seed=0):
    """Largest ``|z^T H (z ⊗ z)|`` over ``trials`` random unit vectors ``z``."""
    if trials < 1:
        raise ValueError("trials must be positive")
    n = H.shape[0]
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, trials))
    Z /= np.linalg.norm(Z, axis=0)
    values = np.sum(Z * quadratic_action(H, Z), axis=0)
    return float(np.max(np.abs(values)))


# Linear part =================================================================
def is_hurwitz(A):
    """Return ``(hurwitz, spectral_abscissa)``."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    try:
        eigs = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f"eigensolver did not converge: {err}") from err
    abscissa = float(np.max(eigs.real))
    return abscissa < 0, abscissa


def is_positive_definite(M):
    """Symmetric ``M`` with smallest eigenvalue above ``1e-12 * |M|_2``."""
    M = np.asarray(M, dtype=float)
    eigs = np.linalg.eigvalsh(M)
    floor = 1e-12 * float(np.max(np.abs(eigs)))
    return bool(eigs[0] > floor)


def monotone_decompose(A):
    """Split ``A = J - R`` with ``J`` skew and ``R`` symmetric.

    Raises :class:`CertificationError` unless ``R`` is positive definite,
    i.e. unless ``A`` is monotonically stable.
    """
    J = skew_part(A)
    R = -sym_part(A)
    if not is_positive_definite(R):
        lam = float(np.linalg.eigvalsh(R)[0])
        raise CertificationError(
            f"symmetric part of A is not negative definite (min eig of R = {lam:.3e})")
    return J, R


# Certificates ================================================================
@dataclasses.dataclass(frozen=True, eq=False)
class StabilityCertificate:
    """Witnesses ``(J, R, Q)`` with ``A = (J - R) Q``; ``Q = I`` is the monotone case."""

    J: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    sigma_min_R: float
    B_norm: float
    energy_violation: float = 0.0

    @property
    def generalized(self):
        return not np.array_equal(self.Q, np.eye(self.Q.shape[0]))

    def trapping_radius(self, u_bound):
        """``|B|_2 u_bound / sigma_min(R)``; in ``Q x`` coordinates when generalized."""
        if u_bound < 0:
            raise ValueError("u_bound must be nonnegative")
        if u_bound == 0:
            return 0.0
        return self.B_norm * u_bound / self.sigma_min_R

    def lyapunov(self, X):
        """``x^T Q x`` for a vector or for each column of ``X``."""
        X = np.asarray(X, dtype=float)
        return np.sum(X * (self.Q @ X), axis=0)

    def state_bound(self, x0, u_bound):
        """Upper bound on ``|x(t)|_2`` for all ``t >= 0``.

        With ``Q = I`` this is ``max(|x0|_2, radius)``. Otherwise the sublevel
        set ``{x^T Q x <= c}`` with ``c = max(V(x0), radius^2 / lmin(Q))`` is
        invariant and ``|x|^2 <= c / lmin(Q)``.
        """
        x0 = np.asarray(x0, dtype=float).ravel()
        r = self.trapping_radius(u_bound)
        if not self.generalized:
            return max(float(np.linalg.norm(x0)), r)
        lmin = float(np.linalg.eigvalsh(self.Q)[0])
        c = max(float(self.lyapunov(x0)), r * r / lmin)
        return math.sqrt(c / lmin)


def certify(sys, tol=1e-12):
    """Certificate for the monotone case (``Q = I``), or CertificationError."""
    J, R = monotone_decompose(sys.A)
    check = energy_preserving_check(sys.H, tol=_scaled_tol(sys.H, tol))
    if not check.passed:
        raise CertificationError(
            f"H is not energy preserving (violation {check.violation:.3e})")
    return StabilityCertificate(J=J, R=R, Q=np.eye(sys.n),
                                sigma_min_R=min_singular_value(R),
                                B_norm=spectral_norm(sys.B),
                                energy_violation=check.violation)


def _scaled_tol(H, tol):
    scale = np.max(np.abs(H.data)) if sparse.issparse(H) and H.nnz else (
        np.max(np.abs(H)) if not sparse.issparse(H) else 0.0)
    return tol * max(1.0, float(scale))


def trapping_radius(sys, u_bound):
    """``|B|_2 u_bound / sigma_min(R)`` for a certified system."""
    return certify(sys).trapping_radius(u_bound)


@dataclasses.dataclass(frozen=True)
class BibsReport:
    max_norm: float
    bound: float
    radius: float
    bounded: bool
    monotone_outside: bool

    @property
    def satisfied(self):
        return self.bounded and self.monotone_outside


def verify_bibs(sys, x0, u, horizon, u_bound, n_samples=501, t_grid=None,
                certificate=None, rel_tol=1e-6, slack=1e-9, substeps=None):
    """Simulate ``sys`` and check the certified state bound at every sample.

    Also checks that the Lyapunov norm ``sqrt(x^T Q x)`` does not increase
    (up to ``slack``) between consecutive samples lying outside the trapping
    region. Divergence propagates as :class:`models.SimulationDiverged`.
    """
    if certificate is None:
        certificate = certify(sys)
    t_grid = np.linspace(0.0, horizon, n_samples) if t_grid is None else np.asarray(t_grid, float)
    x0 = np.asarray(x0, dtype=float).ravel()
    r = certificate.trapping_radius(u_bound)
    bound = certificate.state_bound(x0, u_bound)
    if substeps is None:
        # |x(t)| <= |x0| + |B| |u|_inf t, since H does no work and A dissipates
        growth = np.linalg.norm(x0) + certificate.B_norm * u_bound * (t_grid[-1] - t_grid[0])
        scale = min(bound, growth) if math.isfinite(bound) else growth
        substeps = models.choose_substeps(sys, t_grid, state_scale=scale)
    X = models.simulate(sys, x0, u, t_grid, substeps=substeps)
    norms = np.linalg.norm(X, axis=0)
    bounded = bool(np.all(norms <= bound * (1 + rel_tol) + 1e-300))

    energy = np.sqrt(certificate.lyapunov(X))
    outside = np.linalg.norm(certificate.Q @ X, axis=0) > r
    pairs = outside[:-1] & outside[1:]
    increase = energy[1:] - energy[:-1]
    monotone = bool(np.all(increase[pairs] <= slack * np.maximum(1.0, energy[:-1][pairs])))
    return BibsReport(max_norm=float(norms.max()), bound=bound, radius=r,
                      bounded=bounded, monotone_outside=monotone)


# Skew-block form =============================================================
def blocks_to_H(blocks):
    """Concatenate ``n`` blocks ``H_k`` (n, n) into ``H = [H_1 ... H_n]``."""
    blocks = np.asarray(blocks, dtype=float)
    return np.concatenate(list(blocks), axis=1)


def to_skew_block_form(H, tol=1e-12):
    """Skew blocks ``H_1 ... H_n`` with the same quadratic action as ``H``.

    With ``S_ijk = (H_ijk + H_ikj) / 2``, ``(H_k)_ij = 2/3 (S_ijk - S_jik)``.
    Returns an (n, n, n) array whose ``k``-th slice is ``H_k``.
    """
    check = energy_preserving_check(H, tol=_scaled_tol(H, tol))
    if not check.passed:
        raise CertificationError(
            f"H is not energy preserving (violation {check.violation:.3e})")
    Hd = H.toarray() if sparse.issparse(H) else np.asarray(H, dtype=float)
    n = Hd.shape[0]
    T = Hd.reshape((n, n, n))
    S = (T + T.transpose(0, 2, 1)) / 2
    # blocks[k, i, j] = 2/3 (S[i, j, k] - S[j, i, k])
    Sk = S.transpose(2, 0, 1)
    return (2.0 / 3.0) * (Sk - Sk.transpose(0, 2, 1))


def generalized_certificate(sys, Q, tol=1e-10):
    """Certificate with Lyapunov function ``x^T Q x``.

    Requires ``A Q^{-1} = J - R`` (J skew, R positive definite) and every
    block of ``H`` to be ``H_k Q`` with ``H_k`` skew.
    """
    Q = np.asarray(Q, dtype=float)
    n = sys.n
    if Q.shape != (n, n) or not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise CertificationError("Q must be symmetric (n, n)")
    if not is_positive_definite(Q):
        raise CertificationError("Q must be positive definite")
    # M Q = A  <=>  Q M^T = A^T
    M = np.linalg.solve(Q, sys.A.T).T
    J, R = monotone_decompose(M)
    Hd = sys.H_dense()
    worst = 0.0
    for k in range(n):
        Hk = np.linalg.solve(Q, Hd[:, k * n:(k + 1) * n].T).T
        scale = max(1.0, float(np.abs(Hk).max()))
        worst = max(worst, float(np.abs(Hk + Hk.T).max()) / scale)
    if worst > tol:
        raise CertificationError(
            f"H blocks are not of the form H_k Q with skew H_k (defect {worst:.3e})")
    return StabilityCertificate(J=J, R=R, Q=Q, sigma_min_R=min_singular_value(R),
                                B_norm=spectral_norm(sys.B), energy_violation=worst)


def certificate_report(sys, Q=None):
    """JSON-ready summary of the stability checks for ``sys``."""
    hurwitz, abscissa = is_hurwitz(sys.A)
    report = {
        "hurwitz": bool(hurwitz),
        "abscissa": abscissa,
        "monotone": False,
        "sigma_min_R": None,
        "energy_preserving_violation": energy_preserving_check(sys.H).violation,
        "energy_preserving": False,
        "trapping_radius_per_unit_input": None,
        "certified": False,
        "reason": None,
    }
    try:
        J, R = monotone_decompose(sys.A)
        report["monotone"] = True
        report["sigma_min_R"] = min_singular_value(R)
    except CertificationError as err:
        report["reason"] = str(err)
    try:
        cert = certify(sys) if Q is None else generalized_certificate(sys, Q)
    except CertificationError as err:
        report["reason"] = report["reason"] or str(err)
        report["energy_preserving"] = energy_preserving_check(
            sys.H, _scaled_tol(sys.H, 1e-12)).passed
        return report
    report["energy_preserving"] = True
    report["sigma_min_R"] = cert.sigma_min_R
    report["trapping_radius_per_unit_input"] = cert.trapping_radius(1.0)
    report["certified"] = True
    if Q is not None:
        report["Q"] = np.asarray(Q).tolist()
    return report
