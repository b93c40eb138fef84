"""Triangular whitening: unit LDL^T (Cholesky) and its symmetric-pivoted variant.

Both layers compute ``Z = Gamma D^{-1/2} L^{-1} P X_c + b 1^T``; the plain
variant has ``P = I`` and a ridged covariance, the pivoted one factors the
raw covariance and raises small pivots to ``eps``. Rows of the pivoted
output follow the pivot order.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import FactorizationError, NotPositiveDefiniteError, PhaseError
from ..linalg import chol_unit_ldl, pivoted_ldl, strict_lower, symmetrize, tri_solve
from .stats import batch_cov, center


@dataclass(frozen=True)
class LDLCache:
    phase: str
    pivoted: bool
    xc: np.ndarray
    mu: np.ndarray
    L: np.ndarray
    d: np.ndarray
    p: np.ndarray
    clamped: np.ndarray
    y: np.ndarray            # D^{-1/2} L^{-1} P xc
    gamma: Optional[np.ndarray]
    has_bias: bool
    sigma_used: np.ndarray   # value fed to the running average
    pivot_margin: float = np.inf


def _factor(sigma, pivoted, eps, where):
    try:
        if pivoted:
            return pivoted_ldl(sigma, eps)
        return chol_unit_ldl(sigma)
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(exc.index, exc.value, where) from exc
    except FactorizationError as exc:
        raise FactorizationError(f"{where}: {exc}") from exc


def _forward(x, eps, gamma, bias, running, phase, pivoted):
    xc, mu = center(x)
    where = "PLDLP" if pivoted else "LDL"
    if phase == "train":
        sigma = batch_cov(xc, 0.0 if pivoted else eps)
    else:
        sigma = running.require(where)
        if not pivoted:
            sigma = sigma.copy()
            sigma[np.diag_indices_from(sigma)] += eps
    f = _factor(sigma, pivoted, eps, where)
    xp = xc[f.p] if pivoted else xc
    y = tri_solve(f.L, xp) * (f.d ** -0.5)[:, None]
    z = y if gamma is None else y * gamma[:, None]
    if bias is not None:
        z = z + bias[:, None]
    if pivoted:
        sigma_used = f.reconstruct()
    else:
        sigma_used = batch_cov(xc, 0.0) if phase == "train" else sigma
    cache = LDLCache(phase, pivoted, xc, mu, f.L, f.d, f.p, f.clamped, y, gamma,
                     bias is not None, sigma_used, f.pivot_margin)
    return z, cache


def chol_forward(x, eps, gamma=None, bias=None, running=None, phase="train"):
    return _forward(x, eps, gamma, bias, running, phase, pivoted=False)


def pldlp_forward(x, eps, gamma=None, bias=None, running=None, phase="train"):
    return _forward(x, eps, gamma, bias, running, phase, pivoted=True)


def ldl_backward(cache, grad_z):
    """Reverse pass shared by both triangular layers.

    Returns ``(grad_x, grad_gamma, grad_bias, grad_sigma)``.
    """
    if cache.phase != "train":
        raise PhaseError("LDL backward needs a train-phase cache")
    gz = np.asarray(grad_z, dtype=np.float64)
    L, d, xc = cache.L, cache.d, cache.xc
    n, m = xc.shape
    p = cache.p
    xp = xc[p] if cache.pivoted else xc
    gamma = np.ones(n) if cache.gamma is None else cache.gamma
    scale = gamma * d**-0.5                      # A = diag(scale) L^{-1}

    g_bias = gz.sum(axis=1) if cache.has_bias else None
    g_A = np.tril(gz @ xp.T)
    # A^T gz = L^{-T} diag(scale) gz
    g_xp_z = tri_solve(L, scale[:, None] * gz, trans=True)
    linv_gAt = tri_solve(L, g_A.T)               # L^{-1} g_A^T
    diag_linv_gAt = np.diag(linv_gAt)
    g_gamma = d**-0.5 * diag_linv_gAt if cache.gamma is not None else None
    # diag(A g_A^T) = scale * diag(L^{-1} g_A^T)
    g_d = -0.5 / d * scale * diag_linv_gAt
    if cache.pivoted:
        g_d[cache.clamped] = 0.0
    # A^T g_A L^{-T}
    at_ga = tri_solve(L, scale[:, None] * g_A, trans=True)
    g_L = -strict_lower(tri_solve(L, at_ga, side="right", trans=True))
    # L^{-1} dB L^{-T} = K D + dD + D K^T with K = L^{-1} dL strictly lower
    inner = np.diag(g_d) + strict_lower(L.T @ g_L) / d[None, :]
    g_B = tri_solve(L, tri_solve(L, inner, trans=True), side="right")
    g_B = symmetrize(g_B)
    if cache.pivoted:
        g_sigma = np.empty_like(g_B)
        g_sigma[np.ix_(p, p)] = g_B
        g_xc_z = np.empty_like(g_xp_z)
        g_xc_z[p] = g_xp_z
    else:
        g_sigma = g_B
        g_xc_z = g_xp_z
    g_xc = (2.0 / m) * (g_sigma @ xc) + g_xc_z
    gx = g_xc - g_xc.mean(axis=1, keepdims=True)
    return gx, g_gamma, g_bias, g_sigma
