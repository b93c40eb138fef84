"""Learnable rotation ``Z = Gamma W Y + b 1^T`` with ``W`` the Cayley image of a skew matrix.

The skew generator is stored as its strict upper triangle so that
skew-symmetry holds by construction.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ParameterCorruptionError
from .linalg import cayley, diag_of_product


def n_skew_params(n):
    return n * (n - 1) // 2


def skew_from_upper(upper, n):
    upper = np.asarray(upper, dtype=np.float64)
    if upper.shape != (n_skew_params(n),):
        raise ValueError(f"expected {n_skew_params(n)} skew parameters, got {upper.shape}")
    S = np.zeros((n, n))
    S[np.triu_indices(n, 1)] = upper
    return S - S.T


def upper_from_skew(S):
    return S[np.triu_indices(S.shape[0], 1)].copy()


def triangle_grad(grad_skew):
    """Gradient w.r.t. the strict upper triangle given the skew matrix gradient.

    Perturbing ``s_ij`` moves ``S[i, j]`` and ``S[j, i]`` in opposite
    directions, hence ``g_ij - g_ji``.
    """
    iu = np.triu_indices(grad_skew.shape[0], 1)
    return grad_skew[iu] - grad_skew.T[iu]


@dataclass(frozen=True)
class RotationCache:
    W: np.ndarray
    S: np.ndarray
    y: np.ndarray
    wy: np.ndarray
    gamma: Optional[np.ndarray]
    has_bias: bool


def rotate_forward(y, S, gamma=None, bias=None):
    S = np.asarray(S, dtype=np.float64)
    if not np.array_equal(S, -S.T):
        raise ParameterCorruptionError("rotation generator is not skew-symmetric")
    W = cayley(S)
    wy = W @ y
    z = wy if gamma is None else wy * gamma[:, None]
    if bias is not None:
        z = z + bias[:, None]
    return z, RotationCache(W, S, y, wy, gamma, bias is not None)


def rotate_backward(cache, grad_z):
    """Returns ``(grad_y, grad_gamma, grad_bias, grad_skew)``.

    ``grad_skew`` is the full-matrix gradient projected onto skew matrices.
    """
    gz = np.asarray(grad_z, dtype=np.float64)
    W, S, y = cache.W, cache.S, cache.y
    n = W.shape[0]
    eye = np.eye(n)
    g_gamma = diag_of_product(cache.wy, gz) if cache.gamma is not None else None
    g_bias = gz.sum(axis=1) if cache.has_bias else None
    ggz = gz if cache.gamma is None else gz * cache.gamma[:, None]
    g_y = W.T @ ggz
    g_W = ggz @ y.T
    g_W = 0.5 * (g_W - W @ g_W.T @ W)
    # dW = (I + W) dS (I - S)^{-1}
    lhs = g_W + W.T @ g_W
    # lhs (I + S)^{-1}  <=>  solve (I + S)^T X^T = lhs^T
    g_S = np.linalg.solve((eye + S).T, lhs.T).T
    g_S = 0.5 * (g_S - g_S.T)
    return g_y, g_gamma, g_bias, g_S
