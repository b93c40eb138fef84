"""Batch orthonormalization (whitening) layers with analytic reverse-mode gradients."""
from .errors import BatchOrthoError
from .layers import GradientSet, LayerParams, LayerState, WhiteningLayer, layer_backward, layer_forward
from .spec import WhiteningSpec, parse_spec

__version__ = "0.1.0"
