"""Batch statistics: centering, covariance, running averages, effective rank."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DegenerateBatchError, DegenerateSpectrumError, UninitializedStatisticsError


@dataclass(frozen=True)
class RunningCov:
    sigma_hat: Optional[np.ndarray] = None
    count: int = 0

    def require(self, what="layer"):
        if self.count == 0 or self.sigma_hat is None:
            raise UninitializedStatisticsError(
                f"{what}: evaluation phase needs running statistics; run a training step first"
            )
        return self.sigma_hat


def center(x):
    """Remove the per-channel (row) mean. Returns ``(x_c, mu)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"batch must be N x M, got shape {x.shape}")
    if x.shape[1] < 2:
        raise DegenerateBatchError(f"need at least 2 samples per channel, got {x.shape[1]}")
    mu = x.mean(axis=1)
    return x - mu[:, None], mu


def batch_cov(xc, eps=0.0):
    """``(1/M) xc xc^T + eps I`` built from one triangle and mirrored."""
    m = xc.shape[1]
    s = (xc @ xc.T) / m
    s = np.triu(s) + np.triu(s, 1).T
    if eps:
        s[np.diag_indices_from(s)] += eps
    return s


def batch_var(xc):
    return np.einsum("ij,ij->i", xc, xc) / xc.shape[1]


def update_running(rc, sigma, alpha):
    """``alpha * sigma_hat + (1 - alpha) * sigma``; the first update copies ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if rc.sigma_hat is None or rc.count == 0:
        return RunningCov(sigma.copy(), 1)
    if rc.sigma_hat.shape != sigma.shape:
        raise ValueError(f"shape mismatch: {rc.sigma_hat.shape} vs {sigma.shape}")
    return RunningCov(alpha * rc.sigma_hat + (1.0 - alpha) * sigma, rc.count + 1)


def erank(lam):
    """Effective rank: rounded exponential of the entropy of the l1-normalized spectrum."""
    lam = np.clip(np.asarray(lam, dtype=np.float64), 0.0, None)
    total = lam.sum()
    if not total > 0:
        raise DegenerateSpectrumError("effective rank of an all-zero spectrum")
    p = lam / total
    nz = p[p > 0]
    h = -np.dot(nz, np.log(nz))
    r = int(np.floor(np.exp(h) + 0.5))
    return min(max(r, 1), lam.size)
