"""Operator inference: unconstrained least squares and the certified learner.

The certified learner never sees a constraint. It optimizes free matrices
that are mapped onto the certified class::

    J = Jbar - Jbar^T,  R = Rbar Rbar^T + eps I,  A = J - R,
    H_k = Hbar_k - Hbar_k^T,  H = [H_1 ... H_n],  B = Bhat.

Every iterate is therefore a bounded-input bounded-state stable system.
With ``Qbar`` set, ``Q = Qbar Qbar^T + eps I`` and ``A = (J - R) Q``,
``H = [H_1 Q ... H_n Q]``.
"""

__all__ = [
    "StableParametrization",
    "TrainConfig",
    "Adam",
    "materialize",
    "loss",
    "gradient",
    "cyclic_lr",
    "init_parametrization",
    "fit_stable",
    "fit_stable_generalized",
    "fit_baseline",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

import dataclasses
import json
import logging
import math
import warnings
from typing import Optional

import numpy as np

from . import stability
from .models import QuadraticControlSystem
from .tensor_ops import columnwise_self_kron, compact_self_kron, expand_compact_H

log = logging.getLogger(__name__)


# Parametrization =============================================================
@dataclasses.dataclass(eq=False)
class StableParametrization:
    Jbar: np.ndarray
    Rbar: np.ndarray
    Hbar: np.ndarray            # (n, n, n); Hbar[k] is the k-th free block
    Bhat: np.ndarray
    Qbar: Optional[np.ndarray] = None
    eps: float = 1e-8

    @property
    def n(self):
        return self.Jbar.shape[0]

    @property
    def m(self):
        return self.Bhat.shape[1]

    @property
    def generalized(self):
        return self.Qbar is not None

    def arrays(self):
        out = [self.Jbar, self.Rbar, self.Hbar, self.Bhat]
        if self.Qbar is not None:
            out.append(self.Qbar)
        return out

    def to_vector(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, v):
        """Copy with entries taken from the flat vector ``v``."""
        parts, start = [], 0
        for a in self.arrays():
            parts.append(np.array(v[start:start + a.size]).reshape(a.shape))
            start += a.size
        Qbar = parts[4] if self.generalized else None
        return StableParametrization(*parts[:4], Qbar=Qbar, eps=self.eps)

    def copy(self):
        return self.with_vector(self.to_vector())

    def to_dict(self):
        d = {"Jbar": self.Jbar.tolist(), "Rbar": self.Rbar.tolist(),
             "Hbar": self.Hbar.tolist(), "Bhat": self.Bhat.tolist(), "eps": self.eps}
        if self.generalized:
            d["Qbar"] = self.Qbar.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        Qbar = np.array(d["Qbar"], dtype=float) if d.get("Qbar") is not None else None
        return cls(np.array(d["Jbar"], dtype=float), np.array(d["Rbar"], dtype=float),
                   np.array(d["Hbar"], dtype=float), np.array(d["Bhat"], dtype=float),
                   Qbar=Qbar, eps=float(d.get("eps", 1e-8)))


def _parts(p):
    n = p.n
    J = p.Jbar - p.Jbar.T
    R = p.Rbar @ p.Rbar.T + p.eps * np.eye(n)
    Hk = p.Hbar - p.Hbar.transpose(0, 2, 1)
    Q = p.Qbar @ p.Qbar.T + p.eps * np.eye(n) if p.generalized else None
    return J, R, Hk, Q


def _operators(p):
    J, R, Hk, Q = _parts(p)
    if Q is None:
        A = J - R
        H = np.concatenate(list(Hk), axis=1)
    else:
        A = (J - R) @ Q
        H = np.concatenate([blk @ Q for blk in Hk], axis=1)
    return A, H, p.Bhat.copy()


def materialize(p):
    """The certified system described by ``p``."""
    return QuadraticControlSystem(*_operators(p))


def certificate_of(p):
    """Stability certificate of ``materialize(p)``, read off the parametrization."""
    J, R, Hk, Q = _parts(p)
    sys = materialize(p)
    if Q is None:
        return stability.certify(sys)
    return stability.generalized_certificate(sys, Q)


def init_parametrization(n, m, std=0.1, seed=0, generalized=False, eps=1e-8):
    """Gaussian initialization; ``Qbar`` starts at the identity plus noise."""
    rng = np.random.default_rng(seed)
    Jbar = rng.normal(0.0, std, (n, n))
    Rbar = rng.normal(0.0, std, (n, n))
    Hbar = rng.normal(0.0, std, (n, n, n))
    Bhat = rng.normal(0.0, std, (n, m))
    Qbar = np.eye(n) + rng.normal(0.0, std, (n, n)) if generalized else None
    return StableParametrization(Jbar, Rbar, Hbar, Bhat, Qbar=Qbar, eps=eps)


# Training configuration ======================================================
@dataclasses.dataclass
class TrainConfig:
    updates: int = 12000
    lr_min: float = 1e-6
    lr_max: float = 1e-2
    cycle_length: int = 2000
    l1_weight: float = 1e-4
    init_std: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    r_floor: float = 1e-8
    check_every: int = 1000

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.updates < 0:
            raise ValueError("updates must be nonnegative")
        if self.cycle_length < 2:
            raise ValueError("cycle_length must be at least 2")


def cyclic_lr(step, cfg):
    """Triangular schedule: lr_min at cycle start/end, lr_max mid-cycle."""
    pos = (step % cfg.cycle_length) / cfg.cycle_length
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 - abs(2.0 * pos - 1.0))


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


# Loss and gradient ===========================================================
class _Problem:
    """Data-dependent quantities of the least-squares residual.

    For wide data the Gram matrices ``D D^T`` and ``Xdot D^T`` replace the
    residual matrix; if the residual is tiny relative to ``Xdot`` the direct
    form is used so cancellation cannot corrupt it.
    """

    def __init__(self, dataset):
        if dataset.Xdot is None:
            raise ValueError("dataset has no derivative snapshots")
        self.X, self.U, self.Xdot = dataset.X, dataset.U, dataset.Xdot
        self.D = np.vstack([self.X, columnwise_self_kron(self.X), self.U])
        self.use_gram = self.D.shape[1] > 4 * self.D.shape[0]
        if self.use_gram:
            self.G = self.D @ self.D.T
            self.C = self.Xdot @ self.D.T
            self.xx = float(np.sum(self.Xdot**2))

    def residual(self, O):
        """Return ``(|E|_F, dL/dO)`` for ``E = Xdot - O D``."""
        if self.use_gram:
            OG = O @ self.G
            sq = self.xx - 2.0 * np.sum(O * self.C) + np.sum(O * OG)
            if sq > 1e-8 * self.xx:
                res = math.sqrt(sq)
                return res, (OG - self.C) / res
        E = self.Xdot - O @ self.D
        res = float(np.linalg.norm(E))
        if res == 0.0:
            return 0.0, np.zeros_like(O)
        return res, -(E @ self.D.T) / res


def _objective(p, problem, l1_weight):
    n, m = p.n, p.m
    J, R, Hk, Q = _parts(p)
    A, H, B = _operators(p)
    O = np.hstack([A, H, B])
    res, GO = problem.residual(O)
    value = res + l1_weight * float(np.sum(np.abs(H)))
    GA = GO[:, :n]
    GH = GO[:, n:n + n * n] + l1_weight * np.sign(H)
    GB = GO[:, n + n * n:]
    GHk = GH.reshape((n, n, n)).transpose(1, 0, 2)    # GHk[k] = dL/d(block k)

    if Q is None:
        GM, Gblk, GQ = GA, GHk, None
    else:
        M = J - R
        GM = GA @ Q
        GQ = M.T @ GA
        Gblk = GHk @ Q
        GQ = GQ + np.einsum("kij,kil->jl", Hk, GHk)
    # M = J - R with J = Jbar - Jbar^T and R = Rbar Rbar^T + eps I
    g_J = GM - GM.T
    g_R = -(GM + GM.T) @ p.Rbar
    g_H = Gblk - Gblk.transpose(0, 2, 1)
    grads = [g_J, g_R, g_H, GB]
    if Q is not None:
        grads.append((GQ + GQ.T) @ p.Qbar)
    return value, np.concatenate([g.ravel() for g in grads])


def loss(p, dataset, cfg=None):
    """``|Xdot - A X - H (X ⊗̃ X) - B U|_F + l1_weight |H|_1`` at ``materialize(p)``."""
    cfg = cfg or TrainConfig()
    return _objective(p, _Problem(dataset), cfg.l1_weight)[0]


def gradient(p, dataset, cfg=None):
    """Gradient of :func:`loss` as a parametrization of the same shape."""
    cfg = cfg or TrainConfig()
    g = _objective(p, _Problem(dataset), cfg.l1_weight)[1]
    return p.with_vector(g)


# Fitting =====================================================================
def _fit(dataset, n, m, cfg, generalized):
    if n is None:
        n = dataset.n
    if m is None:
        m = dataset.m
    if (n, m) != (dataset.n, dataset.m):
        raise ValueError(f"dataset has (n, m) = {(dataset.n, dataset.m)}, expected {(n, m)}")
    problem = _Problem(dataset)
    p = init_parametrization(n, m, std=cfg.init_std, seed=cfg.seed,
                             generalized=generalized, eps=cfg.r_floor)
    theta = p.to_vector()
    opt = Adam(theta.size, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = np.empty(cfg.updates + 1)
    best_value, best_theta = math.inf, theta
    for step in range(cfg.updates + 1):
        current = p.with_vector(theta)
        value, grad = _objective(current, problem, cfg.l1_weight)
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            raise FloatingPointError(
                f"non-finite loss or gradient at step {step} (loss = {value})")
        history[step] = value
        if value < best_value:
            best_value, best_theta = value, theta
        if cfg.check_every and step % cfg.check_every == 0:
            certificate_of(current)
        if step == cfg.updates:
            break
        theta = opt.step(theta, grad, cyclic_lr(step, cfg))
    log.info("certified fit: best loss %.6g of %.6g initial", best_value, history[0])
    return p.with_vector(best_theta), history


def fit_stable(dataset, n=None, m=None, cfg=None):
    """Fit a certified model; returns ``(parametrization, loss_history)``.

    The returned parametrization is the iterate with the smallest recorded
    loss. ``loss_history[s]`` is the loss before update ``s``.
    """
    return _fit(dataset, n, m, cfg or TrainConfig(), generalized=False)


def fit_stable_generalized(dataset, n=None, m=None, cfg=None):
    """As :func:`fit_stable`, with a learned Lyapunov weight ``Q``."""
    return _fit(dataset, n, m, cfg or TrainConfig(), generalized=True)


def fit_baseline(dataset, ridge=0.0):
    """Unconstrained least-squares operator inference.

    Solves ``min |Xdot - [A, H, B] D|_F^2 + ridge |[A, Hc, B]|_F^2`` over the
    non-redundant quadratic coefficients ``Hc`` (products ``x_i x_j``,
    i <= j) and expands to the symmetric full ``H``. With ``ridge = 0`` and a
    rank-deficient regressor the minimum-norm solution is returned and a
    ``RuntimeWarning`` is issued.
    """
    if dataset.Xdot is None:
        raise ValueError("dataset has no derivative snapshots")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    X, U, Xdot = dataset.X, dataset.U, dataset.Xdot
    n, m = X.shape[0], U.shape[0]
    Dc = np.vstack([X, compact_self_kron(X), U])
    rows = Dc.shape[0]
    lhs, rhs_ = Dc.T, Xdot.T
    if ridge > 0:
        lhs = np.vstack([lhs, math.sqrt(ridge) * np.eye(rows)])
        rhs_ = np.vstack([rhs_, np.zeros((rows, n))])
    sol, _, rank, sv = np.linalg.lstsq(lhs, rhs_, rcond=None)
    data_sv = np.linalg.svd(Dc, compute_uv=False)
    data_rank = int(np.sum(data_sv > data_sv[0] * max(Dc.shape) * np.finfo(float).eps)) \
        if data_sv[0] > 0 else 0
    if data_rank < rows:
        warnings.warn(
            f"regressor is rank deficient ({data_rank} < {rows}); "
            + ("minimum-norm solution returned" if ridge == 0 else f"ridge {ridge:g} applied"),
            RuntimeWarning, stacklevel=2)
    O = sol.T
    A = O[:, :n]
    nq = n * (n + 1) // 2
    H = expand_compact_H(O[:, n:n + nq], n)
    B = O[:, n + nq:]
    log.info("baseline fit: ridge %g, regressor rank %d of %d", ridge, data_rank, rows)
    return QuadraticControlSystem(A, H, B)


# Persistence =================================================================
def model_to_dict(sys, kind, params=None, config=None, certificate=None, extra=None):
    """JSON-ready model document."""
    doc = {
        "kind": kind,
        "n": sys.n,
        "m": sys.m,
        "A": sys.A.tolist(),
        "H": np.asarray(sys.H_dense()).tolist(),
        "B": sys.B.tolist(),
        "parametrization": params.to_dict() if params is not None else None,
        "config": config,
        "certificate": certificate,
    }
    if extra:
        doc.update(extra)
    return doc


def model_from_dict(doc):
    try:
        sys = QuadraticControlSystem(np.array(doc["A"], dtype=float),
                                     np.array(doc["H"], dtype=float),
                                     np.array(doc["B"], dtype=float))
    except (KeyError, TypeError) as err:
        raise ValueError(f"malformed model document: {err}") from err
    params = doc.get("parametrization")
    return sys, (StableParametrization.from_dict(params) if params else None)


def save_model(path, sys, kind, params=None, config=None, certificate=None, extra=None):
    doc = model_to_dict(sys, kind, params, config, certificate, extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return doc


def load_model(path):
    """Return ``(system, parametrization or None, document)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: model document must be a JSON object")
    sys, params = model_from_dict(doc)
    return sys, params, doc
