"""Per-channel standardization (batch normalization)."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import PhaseError
from .stats import batch_var, center


@dataclass(frozen=True)
class BNCache:
    phase: str
    xc: np.ndarray
    mu: np.ndarray
    var: np.ndarray          # sigma^2 actually used (ridge included)
    y: np.ndarray            # D^{-1/2} xc
    gamma: Optional[np.ndarray]
    has_bias: bool
    sigma_batch: np.ndarray  # diagonal batch covariance, no ridge

    @property
    def inv_std(self):
        return self.var ** -0.5


def bn_forward(x, eps, gamma=None, bias=None, running=None, phase="train"):
    """``Z = Gamma D^{-1/2} X_c + b 1^T`` with D the (ridged) channel variances.

    In the eval phase the variances come from ``diag(running.sigma_hat) + eps``.
    """
    xc, mu = center(x)
    raw = batch_var(xc)
    if phase == "train":
        var = raw + eps
    else:
        var = np.diag(running.require("BN")).copy() + eps
    y = xc * (var ** -0.5)[:, None]
    z = y if gamma is None else y * gamma[:, None]
    if bias is not None:
        z = z + bias[:, None]
    cache = BNCache(phase, xc, mu, var, y, gamma, bias is not None, np.diag(raw))
    return z, cache


def bn_backward(cache, grad_z):
    """Returns ``(grad_x, grad_gamma, grad_bias)``; absent parameters give None."""
    if cache.phase != "train":
        raise PhaseError("BN backward needs a train-phase cache")
    gz = np.asarray(grad_z, dtype=np.float64)
    xc = cache.xc
    m = xc.shape[1]
    g_gamma = np.einsum("ij,ij->i", cache.y, gz) if cache.gamma is not None else None
    g_bias = gz.sum(axis=1) if cache.has_bias else None
    gy = gz if cache.gamma is None else gz * cache.gamma[:, None]
    inv = cache.inv_std
    gxc = gy * inv[:, None]
    # d(var_i)/d(xc_i) = 2 xc_i / M
    g_var = -0.5 * inv**3 * np.einsum("ij,ij->i", xc, gy)
    gxc += (2.0 / m) * g_var[:, None] * xc
    gx = gxc - gxc.mean(axis=1, keepdims=True)
    return gx, g_gamma, g_bias
