"""Layer composition: optional standardizer, whitener, optional rotation, scale and bias.

``layer_forward``/``layer_backward`` dispatch over every supported
``WhiteningSpec``; ``WhiteningLayer`` bundles parameters and running
state for use inside a network.
"""
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from ..errors import PhaseError
from ..rotation import (
    RotationCache,
    n_skew_params,
    rotate_backward,
    rotate_forward,
    skew_from_upper,
)
from ..spec import WhiteningSpec, parse_spec
from .bn import BNCache, bn_backward, bn_forward
from .ldl import LDLCache, chol_forward, ldl_backward, pldlp_forward
from .stats import RunningCov, update_running
from .zca import ZCACache, zca_backward, zca_forward, zca_transform

PHASES = ("train", "eval")


@dataclass
class LayerParams:
    gamma: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    skew_upper: Optional[np.ndarray] = None

    @property
    def n(self):
        for v in (self.gamma, self.bias):
            if v is not None:
                return v.shape[0]
        raise ValueError("parameter set has no per-channel vector")

    @property
    def skew(self):
        if self.skew_upper is None:
            return None
        return skew_from_upper(self.skew_upper, self.n)

    @classmethod
    def init(cls, spec, n):
        """Unit scale, zero bias, zero rotation generator (W = I)."""
        gamma = np.ones(n) if spec.scale else None
        skew = np.zeros(n_skew_params(n)) if spec.rotate else None
        return cls(gamma=gamma, bias=np.zeros(n), skew_upper=skew)

    def copy(self):
        return LayerParams(*(None if v is None else v.copy()
                             for v in (self.gamma, self.bias, self.skew_upper)))


@dataclass
class LayerState:
    running: RunningCov = field(default_factory=RunningCov)
    standardize: RunningCov = field(default_factory=RunningCov)
    # eval-phase ZCA transform, keyed on the running covariance object
    _memo: Any = field(default=None, repr=False, compare=False)

    def zca_eval_transform(self, spec):
        sigma = self.running.require("ZCA")
        if self._memo is None or self._memo[0] is not sigma:
            cond = zca_transform(sigma, spec.conditioning, spec.eps, spec.c)
            self._memo = (sigma, cond)
        return self._memo[1]


@dataclass(frozen=True)
class GradientSet:
    grad_x: np.ndarray
    grad_gamma: Optional[np.ndarray]
    grad_bias: Optional[np.ndarray]
    grad_skew: np.ndarray


@dataclass(frozen=True)
class LayerCache:
    spec: WhiteningSpec
    phase: str
    standardize: Optional[BNCache]
    whiten: Any
    rotation: Optional[RotationCache]


def _running_sample(cache):
    if isinstance(cache, BNCache):
        return cache.sigma_batch
    if isinstance(cache, LDLCache):
        return cache.sigma_used
    if isinstance(cache, ZCACache):
        return cache.cond.sigma
    raise TypeError(type(cache))


def _whiten_forward(spec, h, gamma, bias, state, phase):
    w = spec.whitener
    if w == "BN":
        return bn_forward(h, spec.eps, gamma, bias, state.running, phase)
    if w == "LDL":
        return chol_forward(h, spec.eps, gamma, bias, state.running, phase)
    if w == "PLDLP":
        return pldlp_forward(h, spec.eps, gamma, bias, state.running, phase)
    memo = state.zca_eval_transform(spec) if phase == "eval" else None
    return zca_forward(h, spec, gamma, bias, state.running, phase, memo=memo)


def _whiten_backward(cache, g):
    if isinstance(cache, BNCache):
        return bn_backward(cache, g)
    if isinstance(cache, LDLCache):
        return ldl_backward(cache, g)[:3]
    return zca_backward(cache, g)[:3]


def layer_forward(spec, x, params, state, phase="train"):
    """Run one layer; in the train phase the running covariances of ``state`` are updated."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    if isinstance(spec, str):
        spec = parse_spec(spec)
    h = np.asarray(x, dtype=np.float64)
    std_cache = None
    if spec.standardize_first:
        h, std_cache = bn_forward(h, spec.eps, None, None, state.standardize, phase)
    stage_gamma = None if spec.stage_parameterless else params.gamma
    stage_bias = None if spec.stage_parameterless else params.bias
    z, w_cache = _whiten_forward(spec, h, stage_gamma, stage_bias, state, phase)
    rot_cache = None
    if spec.rotate:
        gamma = params.gamma if spec.scale else None
        z, rot_cache = rotate_forward(z, params.skew, gamma, params.bias)
    if phase == "train":
        if std_cache is not None:
            state.standardize = update_running(state.standardize, std_cache.sigma_batch, spec.alpha)
        state.running = update_running(state.running, _running_sample(w_cache), spec.alpha)
    return z, LayerCache(spec, phase, std_cache, w_cache, rot_cache)


def layer_backward(spec, cache, grad_z):
    """Reverse pass through the composition cached by ``layer_forward``."""
    g = np.asarray(grad_z, dtype=np.float64)
    n = g.shape[0]
    g_skew = np.zeros((n, n))
    g_gamma = g_bias = None
    if cache.rotation is not None:
        g, g_gamma, g_bias, g_skew = rotate_backward(cache.rotation, g)
    gx, wg_gamma, wg_bias = _whiten_backward(cache.whiten, g)
    if cache.rotation is None:
        g_gamma, g_bias = wg_gamma, wg_bias
    if cache.standardize is not None:
        gx = bn_backward(cache.standardize, gx)[0]
    return GradientSet(gx, g_gamma, g_bias, g_skew)


def corr_forward(x, spec, params, state, phase="train"):
    """Parameterless standardization followed by whitening of the correlation matrix."""
    if not spec.standardize_first:
        raise ValueError(f"{spec.name} is not a corr composition")
    return layer_forward(spec, x, params, state, phase)


def corr_backward(cache, grad_z):
    return layer_backward(cache.spec, cache, grad_z)


class WhiteningLayer:
    """Stateful wrapper: parameters, running statistics and the last cache."""

    def __init__(self, spec, n):
        self.spec = parse_spec(spec) if isinstance(spec, str) else spec
        self.n = n
        self.params = LayerParams.init(self.spec, n)
        self.state = LayerState()
        self.cache = None

    def forward(self, x, phase="train"):
        z, cache = layer_forward(self.spec, x, self.params, self.state, phase)
        self.cache = cache if phase == "train" else None
        return z

    def backward(self, grad_z):
        if self.cache is None:
            raise PhaseError("backward called without a train-phase forward")
        return layer_backward(self.spec, self.cache, grad_z)
