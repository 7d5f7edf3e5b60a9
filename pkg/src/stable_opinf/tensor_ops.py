"""Dense linear-algebra and Kronecker-structure primitives.

Matrices are plain ``numpy.ndarray`` objects. Quadratic operators ``H`` may
additionally be ``scipy.sparse`` matrices, which only matters for the
large semi-discretized PDE models.
"""

__all__ = [
    "as_matrix",
    "kron_vec",
    "columnwise_self_kron",
    "compact_self_kron",
    "expand_compact_H",
    "make_quadratic_action",
    "quadratic_action",
    "skew_part",
    "sym_part",
    "min_singular_value",
    "spectral_norm",
    "thin_svd",
]

import numpy as np
import scipy.sparse as sparse


def as_matrix(M, name="matrix"):
    """Return ``M`` as a finite 2-D float array, raising ``ValueError`` otherwise."""
    M = np.array(M, dtype=float)
    if M.ndim == 1:
        M = M.reshape((-1, 1))
    if M.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got ndim={M.ndim}")
    if M.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


def kron_vec(x):
    """Kronecker square ``x ⊗ x``; entry ``i*n + j`` is ``x[i] * x[j]``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("x must be nonempty")
    return np.outer(x, x).ravel()


def columnwise_self_kron(G):
    """Column-wise Kronecker square of an (n, k) matrix, shape (n**2, k)."""
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        return kron_vec(G)
    n, k = G.shape
    if k < 1:
        raise ValueError("G must have at least one column")
    return (G[:, None, :] * G[None, :, :]).reshape((n * n, k))


def _upper_indices(n):
    return np.triu_indices(n)


def compact_self_kron(G):
    """Non-redundant column-wise Kronecker square: rows ``x_i x_j`` for i <= j.

    Shape is (n(n+1)/2, k). The full Kronecker square carries each product
    with i != j twice, so it is always rank deficient for n >= 2.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G.reshape((-1, 1))
    i, j = _upper_indices(G.shape[0])
    return G[i] * G[j]


def expand_compact_H(Hc, n):
    """Map compact coefficients (n, n(n+1)/2) to the symmetric full (n, n**2) H.

    Off-diagonal coefficients are split evenly between the ``(j, k)`` and
    ``(k, j)`` columns, giving the minimum-norm full representative.
    """
    Hc = np.asarray(Hc, dtype=float)
    i, j = _upper_indices(n)
    H = np.zeros((Hc.shape[0], n, n))
    scale = np.where(i == j, 1.0, 0.5)
    H[:, i, j] += Hc * scale
    H[:, j, i] += np.where(i == j, 0.0, 1.0) * Hc * scale
    return H.reshape((Hc.shape[0], n * n))


def make_quadratic_action(H):
    """Return a callable ``f(X) = H (x ⊗ x)`` evaluated column by column.

    For sparse ``H`` the nonzero triplets are extracted once, so repeated
    evaluation (time stepping) never forms the n**2-long Kronecker vector.
    """
    rows = H.shape[0]
    if sparse.issparse(H):
        coo = H.tocoo()
        n = int(round(np.sqrt(H.shape[1])))
        if n * n != H.shape[1]:
            raise ValueError(f"H has {H.shape[1]} columns, not a perfect square")
        j, k = np.divmod(coo.col, n)
        data = coo.data.copy()
        scatter = sparse.csr_matrix(
            (np.ones_like(data), (coo.row, np.arange(data.size))),
            shape=(rows, data.size),
        )

        def action(X):
            return scatter @ (data[:, None] * X[j] * X[k])
    else:
        Hd = np.asarray(H, dtype=float)
        n = int(round(np.sqrt(Hd.shape[1])))
        if n * n != Hd.shape[1]:
            raise ValueError(f"H has {Hd.shape[1]} columns, not a perfect square")
        if n <= 32:
            # small n: the explicit Kronecker square is cheap
            def action(X):
                return Hd @ (X[:, None, :] * X[None, :, :]).reshape((n * n, X.shape[1]))
        else:
            # H_ijk = H[i, j*n + k]; contract k first, then j
            T = Hd.reshape((rows * n, n))

            def action(X):
                Y = (T @ X).reshape((rows, n, X.shape[1]))
                return (Y * X).sum(axis=1)

    def evaluate(X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            if X.shape[0] != n:
                raise ValueError(f"x has length {X.shape[0]}, expected {n}")
            return np.asarray(action(X.reshape((-1, 1))))[:, 0]
        if X.shape[0] != n:
            raise ValueError(f"X has {X.shape[0]} rows, expected {n}")
        return np.asarray(action(X))

    # unchecked (n, k) -> (rows, k) kernel for inner loops
    evaluate.unchecked = action
    return evaluate


def quadratic_action(H, X):
    """Evaluate ``H (x ⊗ x)`` for a vector ``x`` or each column of ``X``."""
    return make_quadratic_action(H)(X)


def _square(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return M


def skew_part(M):
    """Skew-symmetric part ``(M - M^T) / 2``."""
    M = _square(M)
    return (M - M.T) / 2


def sym_part(M):
    """Symmetric part ``(M + M^T) / 2``."""
    M = _square(M)
    return (M + M.T) / 2


def min_singular_value(M):
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        raise ValueError("M must be nonempty")
    return float(np.linalg.svd(np.atleast_2d(M), compute_uv=False)[-1])


def spectral_norm(M):
    """Operator 2-norm (largest singular value)."""
    if sparse.issparse(M):
        M = M.toarray()
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return float(np.linalg.svd(M, compute_uv=False)[0]) if M.size else 0.0


def thin_svd(M):
    """Economy SVD ``M = Phi @ diag(sigma) @ Psi.T``.

    Returns
    -------
    Phi : (N, r) ndarray
        Left singular vectors, r = min(N, k).
    sigma : (r,) ndarray
        Singular values in non-increasing order.
    Psi : (k, r) ndarray
        Right singular vectors.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or min(M.shape) < 1:
        raise ValueError("M must be a nonempty 2-D array")
    Phi, sigma, PsiT = np.linalg.svd(M, full_matrices=False)
    return Phi, sigma, PsiT.T
