"""Dense double-precision factorizations used by the whitening layers.

Every function here is pure: inputs are never modified in place.
"""
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import FactorizationError, NotPositiveDefiniteError


class EigPair(NamedTuple):
    U: np.ndarray
    lam: np.ndarray


class UnitLDL(NamedTuple):
    """``P m P^T = L diag(d) L^T`` with ``m[p][:, p]`` playing ``P m P^T``."""

    L: np.ndarray
    d: np.ndarray
    p: np.ndarray
    clamped: np.ndarray
    # smallest relative gap between the chosen pivot and the runner-up
    pivot_margin: float = np.inf

    def reconstruct(self):
        """Return the matrix in original channel order (clamped pivots included)."""
        b = (self.L * self.d) @ self.L.T
        out = np.empty_like(b)
        out[np.ix_(self.p, self.p)] = b
        return symmetrize(out)


def symmetrize(m):
    return 0.5 * (m + m.T)


def _check_square(m, name="matrix"):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    return m


def _check_symmetric(m):
    m = _check_square(m)
    if not np.array_equal(m, m.T):
        raise ValueError("matrix is not exactly symmetric; call symmetrize() first")
    return m


def sym_eig(m):
    """Eigendecomposition of a symmetric matrix, eigenvalues in descending order.

    Each eigenvector is sign-normalized so that its largest-magnitude
    component is positive, which makes the result reproducible.
    """
    m = _check_square(m)
    if not np.all(np.isfinite(m)):
        raise FactorizationError("sym_eig: matrix has non-finite entries")
    m = _check_symmetric(m)
    try:
        lam, U = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"sym_eig did not converge (n={m.shape[0]}, "
            f"max|m|={np.abs(m).max():.3e}, trace={np.trace(m):.3e})"
        ) from exc
    # stable descending order keeps exactly tied eigenvalues in solver order
    order = np.argsort(-lam, kind="stable")
    lam = lam[order]
    U = U[:, order]
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U *= signs
    return EigPair(U, lam)


def chol_unit_ldl(m):
    """Unit LDL^T of a positive definite matrix via its Cholesky factor."""
    m = _check_symmetric(m)
    n = m.shape[0]
    c, info = lapack.dpotrf(m, lower=1, clean=1)
    if info > 0:
        k = info - 1
        # value of the failing pivot for the error message
        partial = m[k, k] - np.dot(c[k, :k], c[k, :k])
        raise NotPositiveDefiniteError(k, partial)
    if info < 0:
        raise FactorizationError(f"dpotrf argument error {info}")
    diag = np.diag(c).copy()
    L = c / diag
    L[np.diag_indices(n)] = 1.0
    return UnitLDL(np.tril(L), diag**2, np.arange(n), np.zeros(n, dtype=bool))


def pivoted_ldl(m, eps=0.0):
    """Symmetric-pivoted unit LDL^T with 1x1 diagonal pivots.

    At every step the largest remaining diagonal entry is moved to the
    front. After the factorization, pivots below ``eps`` are raised to
    ``eps`` and flagged in ``clamped``.
    """
    m = _check_symmetric(m)
    n = m.shape[0]
    a = m.copy()
    L = np.eye(n)
    d = np.zeros(n)
    p = np.arange(n)
    margin = np.inf
    for k in range(n):
        diag = np.diag(a)[k:]
        j = k + int(np.argmax(diag))
        if n - k > 1:
            top2 = np.partition(diag, -2)[-2:]
            scale = max(abs(top2[1]), np.finfo(float).tiny)
            margin = min(margin, (top2[1] - top2[0]) / scale)
        if j != k:
            a[[k, j], :] = a[[j, k], :]
            a[:, [k, j]] = a[:, [j, k]]
            L[[k, j], :k] = L[[j, k], :k]
            p[[k, j]] = p[[j, k]]
        dk = a[k, k]
        if dk < -max(eps, 0.0):
            raise NotPositiveDefiniteError(k, dk, "pivoted_ldl: matrix is not PSD")
        d[k] = dk
        if dk > 0.0:
            col = a[k + 1:, k] / dk
            L[k + 1:, k] = col
            a[k + 1:, k + 1:] -= np.outer(col, a[k, k + 1:])
        # dk <= 0: remaining block is numerically zero for PSD input
    clamped = d < eps
    d = np.where(clamped, eps, d)
    return UnitLDL(L, d, p, clamped, float(margin))


def tri_solve(L, B, side="left", trans=False):
    """Solve with a unit lower-triangular ``L`` without forming its inverse.

    side="left":  returns op(L)^{-1} B
    side="right": returns B op(L)^{-1}
    where op(L) is ``L.T`` when ``trans`` is set.
    """
    B = np.asarray(B, dtype=np.float64)
    if side == "left":
        return scipy.linalg.solve_triangular(
            L, B, lower=True, unit_diagonal=True, trans=1 if trans else 0,
            check_finite=False,
        )
    if side == "right":
        # X op(L) = B  <=>  op(L)^T X^T = B^T
        xt = scipy.linalg.solve_triangular(
            L, B.T, lower=True, unit_diagonal=True, trans=0 if trans else 1,
            check_finite=False,
        )
        return xt.T
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def build_F(lam, K=np.inf):
    """Reciprocal eigen-gap matrix ``F[i, j] = 1 / (lam[j] - lam[i])``.

    Zero gaps give 0 and magnitudes above ``K`` are clipped to ``K``.
    The result is exactly antisymmetric with a zero diagonal.
    """
    lam = np.asarray(lam, dtype=np.float64)
    gap = lam[None, :] - lam[:, None]
    with np.errstate(divide="ignore"):
        F = 1.0 / gap
    F[~np.isfinite(F)] = 0.0
    big = np.abs(F) > K
    F[big] = K * np.sign(F[big])
    upper = np.triu(F, 1)
    return upper - upper.T


def cayley(S):
    """Orthonormal ``W = (I + S)(I - S)^{-1}`` of a skew-symmetric ``S``."""
    S = _check_square(S, "S")
    eye = np.eye(S.shape[0])
    try:
        # (I - S)^{-1} and (I + S) commute
        return np.linalg.solve(eye - S, eye + S)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("cayley: I - S is singular") from exc


def diag_of_product(A, B):
    """``diag(A @ B.T)`` without forming the product."""
    A = np.asarray(A)
    B = np.asarray(B)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    return np.einsum("ij,ij->i", A, B)


def strict_lower(m):
    return np.tril(m, -1)
