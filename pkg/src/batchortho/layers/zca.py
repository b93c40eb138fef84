"""ZCA whitening through the inverse principal square root, with spectrum conditioning.

Conditioning modes pick a floor ``theta`` for the eigenvalues:

* ``plain``:   theta = 0 (only the ``eps`` floor applies)
* ``max``:     theta = c * lambda_max
* ``entropy``: theta = lambda_R, R the effective rank of the spectrum

Eigenvalues below ``max(theta, eps)`` are raised to it. The backward pass
redirects gradient mass of clamped eigenvalues to the eigenvalue that set
the floor and clips the eigen-gap reciprocals at ``K``.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import FactorizationError, PhaseError
from ..linalg import build_F, diag_of_product, sym_eig, symmetrize
from .stats import batch_cov, center, erank


@dataclass(frozen=True)
class Conditioned:
    U: np.ndarray
    lam: np.ndarray          # clamped spectrum, descending
    lam_raw: np.ndarray
    mask: np.ndarray
    theta: float
    r: int                   # effective rank (entropy mode), else 0
    theta_branch: bool       # eps <= theta: clamped to theta rather than eps
    A: np.ndarray

    @property
    def sigma(self):
        """Covariance rebuilt from the clamped spectrum."""
        return symmetrize((self.U * self.lam) @ self.U.T)


@dataclass(frozen=True)
class ZCACache:
    phase: str
    xc: np.ndarray
    mu: np.ndarray
    cond: Conditioned
    y: np.ndarray            # A xc
    gamma: Optional[np.ndarray]
    has_bias: bool
    mode: str
    c: float
    K: float


def condition_spectrum(lam_raw, mode, eps, c):
    """Returns ``(lam, mask, theta, r, theta_branch)``."""
    lam = lam_raw.copy()
    r = 0
    if mode == "plain":
        theta = 0.0
    elif mode == "max":
        theta = c * lam[0]
    elif mode == "entropy":
        r = erank(lam)
        theta = lam[r - 1]
    else:
        raise ValueError(f"unknown conditioning mode {mode!r}")
    theta_branch = eps <= theta
    floor = theta if theta_branch else eps
    mask = lam < floor
    lam[mask] = floor
    return lam, mask, float(theta), r, bool(theta_branch)


def zca_transform(sigma, mode, eps, c):
    """Eigendecompose ``sigma`` and build the conditioned ``A = U Lambda^{-1/2} U^T``."""
    U, lam_raw = sym_eig(sigma)
    lam, mask, theta, r, branch = condition_spectrum(lam_raw, mode, eps, c)
    if lam[-1] <= 0.0:
        raise FactorizationError(
            f"ZCA: conditioned eigenvalue {lam[-1]:.3e} is not positive; use eps > 0 "
            "or max/entropy conditioning for rank-deficient batches")
    A = (U * lam**-0.5) @ U.T
    return Conditioned(U, lam, lam_raw, mask, theta, r, branch, A)


def zca_forward(x, spec, gamma=None, bias=None, running=None, phase="train", memo=None):
    """``Z = Gamma A X_c + b 1^T``.

    Train phase whitens with the ridged batch covariance; eval phase uses
    the running covariance, which already holds the conditioned spectrum.
    ``memo`` may carry a precomputed eval-phase transform.
    """
    xc, mu = center(x)
    if phase == "train":
        cond = zca_transform(batch_cov(xc, spec.eps), spec.conditioning, spec.eps, spec.c)
    elif memo is not None:
        cond = memo
    else:
        cond = zca_transform(running.require("ZCA"), spec.conditioning, spec.eps, spec.c)
    y = cond.A @ xc
    z = y if gamma is None else y * gamma[:, None]
    if bias is not None:
        z = z + bias[:, None]
    cache = ZCACache(phase, xc, mu, cond, y, gamma, bias is not None,
                     spec.conditioning, spec.c, spec.K)
    return z, cache


def zca_backward(cache, grad_z):
    """Returns ``(grad_x, grad_gamma, grad_bias, grad_sigma)``."""
    if cache.phase != "train":
        raise PhaseError("ZCA backward needs a train-phase cache")
    gz = np.asarray(grad_z, dtype=np.float64)
    cond = cache.cond
    U, lam, A = cond.U, cond.lam, cond.A
    xc = cache.xc
    m = xc.shape[1]

    g_gamma = diag_of_product(cache.y, gz) if cache.gamma is not None else None
    g_bias = gz.sum(axis=1) if cache.has_bias else None
    ggz = gz if cache.gamma is None else gz * cache.gamma[:, None]
    g_xc_z = A.T @ ggz
    g_A = symmetrize(ggz @ xc.T)

    g_AU = g_A @ U
    g_U = 2.0 * g_AU * lam**-0.5
    g_U = 0.5 * (g_U - U @ g_U.T @ U)
    g_lam = -0.5 * np.einsum("ij,ij->j", U, g_AU) * lam**-1.5
    mask = cond.mask
    if mask.any():
        if cond.theta_branch:
            moved = g_lam[mask].sum()
            if cache.mode == "max":
                g_lam[0] += cache.c * moved
            elif cache.mode == "entropy":
                g_lam[cond.r - 1] += moved
        g_lam[mask] = 0.0

    F = build_F(lam, cache.K)
    g_sigma = U @ (np.diag(g_lam) + (U.T @ g_U) * F) @ U.T
    g_xc = (2.0 / m) * (g_sigma @ xc) + g_xc_z
    gx = g_xc - g_xc.mean(axis=1, keepdims=True)
    return gx, g_gamma, g_bias, g_sigma
