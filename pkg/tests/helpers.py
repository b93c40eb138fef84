import numpy as np


def white_rows(n, m, rng):
    """Centered ``n x m`` rows whose 1/M sample covariance is exactly I (to rounding)."""
    w = rng.standard_normal((n, m))
    w -= w.mean(axis=1, keepdims=True)
    q, _ = np.linalg.qr(w.T)
    return np.sqrt(m) * q.T


def exact_batch(sigma, m, rng, shift=True):
    """Batch whose sample covariance equals ``sigma``."""
    sigma = np.asarray(sigma, dtype=float)
    n = sigma.shape[0]
    lam, v = np.linalg.eigh(sigma)
    x = (v * np.sqrt(np.clip(lam, 0, None))) @ white_rows(n, m, rng)
    if shift:
        x = x + rng.normal(0, 1, (n, 1))
    return x


def sample_cov(z):
    zc = z - z.mean(axis=1, keepdims=True)
    return zc @ zc.T / z.shape[1]


def random_cov(n, rng, lo=0.3, hi=3.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * rng.uniform(lo, hi, n)) @ q.T
