"""Central finite-difference oracle for the whitening layers.

Each check draws a random instance, probes the layer with the linear
objective ``phi = <G, Z>`` for a fixed random ``G`` and compares the
analytic gradients of every parameter group with central differences of
the full forward pass (covariance estimation included).
"""
import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BatchOrthoError, OracleError
from .layers.compose import LayerParams, LayerState, layer_backward, layer_forward
from .layers.ldl import LDLCache
from .layers.stats import batch_cov
from .layers.zca import ZCACache, zca_backward, zca_transform
from .rotation import n_skew_params, triangle_grad
from .spec import parse_spec

CSV_FIELDS = ("spec", "group", "N", "M", "seed", "max_rel_err", "pass")
MIN_EIGEN_GAP = 1e-3
MIN_PIVOT_MARGIN = 1e-3
DENOM_FLOOR = 1e-8
# balances truncation (h^2) against roundoff (1/h) for O(1) layer outputs
AUDIT_STEP = 3e-5


@dataclass(frozen=True)
class CheckReport:
    spec: str
    group: str
    n: int
    m: int
    seed: int
    max_rel_err: float
    worst: Optional[tuple]
    passed: bool
    note: str = ""

    def row(self):
        return {"spec": self.spec, "group": self.group, "N": self.n, "M": self.m,
                "seed": self.seed, "max_rel_err": f"{self.max_rel_err:.6e}",
                "pass": int(self.passed)}


def reports_to_csv(reports, fh=None):
    out = fh or io.StringIO()
    w = csv.DictWriter(out, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return out.getvalue() if fh is None else None


def fd_gradient(f, x0, h=1e-5):
    """Central differences with per-coordinate step ``h * max(1, |x_i|)``."""
    x = np.array(x0, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.empty(flat.size)
    for i in range(flat.size):
        xi = flat[i]
        step = h * max(1.0, abs(xi))
        flat[i] = xi + step
        fp = f(x)
        flat[i] = xi - step
        fm = f(x)
        flat[i] = xi
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(np.unravel_index(i, x.shape), fp if not np.isfinite(fp) else fm)
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor=DENOM_FLOOR):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; returns ``(max, argmax index)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0, None
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    err = np.abs(a - n) / denom
    k = int(np.argmax(err))
    return float(err.reshape(-1)[k]), tuple(int(i) for i in np.unravel_index(k, a.shape))


def _whitened_rows(n, m, rng):
    """``n x m`` rows that are centered with sample covariance exactly ``I``."""
    w = rng.standard_normal((n, m))
    w -= w.mean(axis=1, keepdims=True)
    q, _ = np.linalg.qr(w.T)
    return np.sqrt(m) * q.T


def _random_rotation(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _designed_batch(lam, m, rng):
    n = lam.size
    v = _random_rotation(n, rng)
    x = (v * np.sqrt(lam)) @ _whitened_rows(n, m, rng)
    return x + rng.normal(0.0, 1.0, (n, 1))


def _spectrum(spec, n, rng, clamped):
    if spec.conditioning == "entropy":
        if clamped:
            # steep decay pushes the effective rank below n
            return np.sort(4.0 ** -np.arange(n) * rng.uniform(0.9, 1.1, n))[::-1]
        return np.sort(rng.uniform(1.0, 2.0, n))[::-1]
    lam = np.sort(rng.uniform(0.2, 2.0, n))[::-1]
    if clamped:
        lam[-1] = lam[0] * spec.c * 1e-3
    return lam


def make_instance(spec, n, m, rng, clamped=False):
    """Random ``(x, params, G)`` for ``spec``; ZCA layers get a controlled spectrum."""
    if spec.whitener == "ZCA" and not spec.standardize_first:
        x = _designed_batch(_spectrum(spec, n, rng, clamped), m, rng)
    else:
        mix = np.eye(n) + 0.4 * rng.standard_normal((n, n)) / np.sqrt(n)
        x = (mix * rng.uniform(0.5, 2.0, n)) @ rng.standard_normal((n, m))
        x += rng.normal(0.0, 1.0, (n, 1))
    params = LayerParams.init(spec, n)
    if params.gamma is not None:
        params.gamma = rng.uniform(0.5, 1.5, n)
    params.bias = rng.standard_normal(n)
    if params.skew_upper is not None:
        params.skew_upper = 0.5 * rng.standard_normal(n_skew_params(n))
    g = rng.standard_normal((n, m))
    return x, params, g


def _min_gap(lam):
    return float(np.min(-np.diff(lam))) if lam.size > 1 else np.inf


def _erank_margin(lam):
    """Distance of ``exp(H) + 1/2`` from the nearest integer."""
    p = np.clip(lam, 0.0, None)
    p = p / p.sum()
    nz = p[p > 0]
    v = np.exp(-np.sum(nz * np.log(nz))) + 0.5
    return abs(v - np.round(v))


def _zca_caches(cache):
    w = cache.whiten
    return [w] if isinstance(w, ZCACache) else []


def instance_issue(cache, clamped=False):
    """Reason the instance is unsuitable for differencing, or None."""
    for zc in _zca_caches(cache):
        lam, mask = zc.cond.lam_raw, zc.cond.mask
        scale = max(1.0, abs(lam[0]))
        # gaps inside the clamped tail do not enter the gradient
        if _min_gap(lam[~mask]) < MIN_EIGEN_GAP * scale:
            return "eigen-gap below guard"
        if mask.any():
            floor = zc.cond.lam[mask][0]
            if np.min(floor - lam[mask]) < MIN_EIGEN_GAP * scale:
                return "eigenvalue too close to the clamping floor"
        if zc.mode == "entropy" and _erank_margin(lam) < MIN_EIGEN_GAP:
            return "effective rank close to a rounding boundary"
        if mask.any() != clamped:
            return "clamping state differs from request"
        if clamped and zc.cond.theta_branch is False:
            return "clamped to eps rather than theta"
    w = cache.whiten
    if isinstance(w, LDLCache) and w.pivoted:
        if w.pivot_margin < MIN_PIVOT_MARGIN:
            return "pivot choice too close to a tie"
        if w.clamped.any():
            return "pivot clamping active"
    return None


def _objective(spec, g):
    def phi(x, params):
        z, _ = layer_forward(spec, x, params, LayerState(), "train")
        return float(np.sum(g * z))
    return phi


def _with(params, name, value):
    p = params.copy()
    setattr(p, name, value)
    return p


def _sigma_check(spec, x, g, cache, h):
    """Clamped ZCA: compare d phi / d Sigma in the eigenbasis on unclamped coordinates only.

    The A-path objective ``<G, Gamma A(Sigma) X_c>`` is differenced with
    ``X_c`` held fixed; ``Sigma`` is perturbed symmetrically.
    """
    zc = cache.whiten
    gamma = zc.gamma if zc.gamma is not None else np.ones(x.shape[0])
    sigma0 = batch_cov(zc.xc, spec.eps)

    def phi_sigma(s):
        s = 0.5 * (s + s.T)
        cond = zca_transform(s, spec.conditioning, spec.eps, spec.c)
        return float(np.sum(g * (gamma[:, None] * (cond.A @ zc.xc))))

    # the probe moves eigenvalues directly, so truncation error scales with
    # (step / gap)^2; keep the step well inside the smallest kept gap
    kept = zc.cond.lam_raw[~zc.cond.mask]
    step = max(1e-6, min(h, 1e-3 * _min_gap(kept)))
    num = fd_gradient(phi_sigma, sigma0, step)
    num = 0.5 * (num + num.T)
    _, _, _, ana = zca_backward(zc, g)
    ana = 0.5 * (ana + ana.T)
    U = zc.cond.U
    num_e = U.T @ num @ U
    ana_e = U.T @ ana @ U
    mask = zc.cond.mask
    keep = ~(mask[:, None] | mask[None, :])
    return relative_error(ana_e[keep], num_e[keep])


def check_layer(spec, n, m, seed, tol=1e-5, h=AUDIT_STEP, clamped=False, max_tries=100):
    """Compare analytic and finite-difference gradients for every parameter group.

    With ``clamped`` the instance is built so that ZCA eigenvalue clamping
    fires; the input gradient is then reported but excluded from the pass
    decision, and an eigenbasis check of ``d phi / d Sigma`` restricted to
    unclamped eigen-coordinates takes its place.
    """
    if isinstance(spec, str):
        spec = parse_spec(spec)
    if clamped and (spec.whitener != "ZCA" or spec.conditioning == "plain"
                    or spec.standardize_first):
        raise ValueError(f"forced clamping needs a max/entropy ZCA layer, got {spec.name}")
    name = spec.name
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        x, params, g = make_instance(spec, n, m, rng, clamped)
        try:
            _, cache = layer_forward(spec, x, params, LayerState(), "train")
        except BatchOrthoError:
            continue
        if instance_issue(cache, clamped) is None:
            break
    else:
        return [CheckReport(name, "instance", n, m, seed, np.inf, None, False,
                            "unsatisfiable instance")]

    grads = layer_backward(spec, cache, g)
    phi = _objective(spec, g)
    reports = []

    def add(group, analytic, numeric, counted=True, note=""):
        err, worst = relative_error(analytic, numeric)
        reports.append(CheckReport(name, group, n, m, seed, err, worst,
                                   (err <= tol) if counted else True, note))

    num_x = fd_gradient(lambda v: phi(v, params), x, h)
    if clamped and _zca_caches(cache):
        add("x", grads.grad_x, num_x, counted=False, note="excluded: clamp-conditioned")
        err, worst = _sigma_check(spec, x, g, cache, h)
        reports.append(CheckReport(name, "sigma_unmasked", n, m, seed, err, worst, err <= tol))
    else:
        add("x", grads.grad_x, num_x)
    if params.gamma is not None:
        add("gamma", grads.grad_gamma,
            fd_gradient(lambda v: phi(x, _with(params, "gamma", v)), params.gamma, h))
    add("bias", grads.grad_bias,
        fd_gradient(lambda v: phi(x, _with(params, "bias", v)), params.bias, h))
    if params.skew_upper is not None:
        add("skew", triangle_grad(grads.grad_skew),
            fd_gradient(lambda v: phi(x, _with(params, "skew_upper", v)), params.skew_upper, h))
    return reports
