"""Network building blocks on NHWC float64 tensors.

Every module exposes ``forward(x, phase)`` and ``backward(grad)`` plus
``params``/``grads`` dictionaries keyed by parameter name.
"""
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..layers.compose import WhiteningLayer
from ..rotation import triangle_grad
from ..spec import WhiteningSpec, parse_spec


def conv_out_size(size, fov, stride):
    if size < fov:
        raise ValueError(f"input size {size} smaller than kernel {fov}")
    return (size - fov) // stride + 1


def _im2col(x, fov, stride):
    """``(B, H, W, C)`` -> ``(B, Ho, Wo, fov, fov, C)`` view of receptive fields."""
    win = sliding_window_view(x, (fov, fov), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv2d_forward(x, w, b, stride=1):
    """Valid (unpadded) convolution; ``w`` is ``(fov, fov, C_in, C_out)``."""
    fov, _, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.shape[3]}")
    cols = _im2col(x, fov, stride)
    bsz, ho, wo = cols.shape[:3]
    flat = cols.reshape(bsz * ho * wo, fov * fov * cin)
    out = flat @ w.reshape(-1, cout) + b
    return out.reshape(bsz, ho, wo, cout), (x.shape, flat, w, stride)


def conv2d_backward(cache, grad):
    x_shape, flat, w, stride = cache
    fov, _, cin, cout = w.shape
    bsz, ho, wo, _ = grad.shape
    g2 = grad.reshape(-1, cout)
    gw = (flat.T @ g2).reshape(w.shape)
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(-1, cout).T).reshape(bsz, ho, wo, fov, fov, cin)
    gx = np.zeros(x_shape)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(fov):
        for j in range(fov):
            gx[:, i:i + hspan:stride, j:j + wspan:stride, :] += gcols[:, :, :, i, j, :]
    return gx, gw, gb


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(mask, grad):
    return grad * mask


def fc_forward(x, w, b):
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"fc expects width {w.shape[0]}, got {x.shape[1]}")
    return x @ w + b, x


def fc_backward(x, w, grad):
    return grad @ w.T, x.T @ grad, grad.sum(axis=0)


def gap_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def gap_backward(shape, grad):
    bsz, h, w, c = shape
    return np.broadcast_to(grad[:, None, None, :] / (h * w), shape).copy()


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent_forward(logits, labels):
    """Mean cross-entropy; returns ``(loss, probabilities)``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(logits.shape[0])
    loss = float(np.mean(logsum - z[idx, labels]))
    return loss, np.exp(z - logsum[:, None])


def softmax_xent_backward(probs, labels):
    g = probs.copy()
    g[np.arange(labels.shape[0]), labels] -= 1.0
    return g / labels.shape[0]


class Module:
    name = "module"

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, phase="train"):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, fov, stride, cin, cout, rng, name="conv"):
        super().__init__()
        self.name = name
        self.stride = stride
        std = np.sqrt(2.0 / (fov * fov * cin))
        self.params = {"w": rng.normal(0.0, std, (fov, fov, cin, cout)), "b": np.zeros(cout)}

    def forward(self, x, phase="train"):
        out, self._cache = conv2d_forward(x, self.params["w"], self.params["b"], self.stride)
        return out

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._cache, grad)
        self.grads = {"w": gw, "b": gb}
        return gx


class ReLU(Module):
    def __init__(self, name="relu"):
        super().__init__()
        self.name = name

    def forward(self, x, phase="train"):
        out, self._mask = relu_forward(x)
        return out

    def backward(self, grad):
        return relu_backward(self._mask, grad)


class Linear(Module):
    def __init__(self, din, dout, rng, name="fc"):
        super().__init__()
        self.name = name
        std = np.sqrt(1.0 / din)
        self.params = {"w": rng.normal(0.0, std, (din, dout)), "b": np.zeros(dout)}

    def forward(self, x, phase="train"):
        out, self._x = fc_forward(x, self.params["w"], self.params["b"])
        return out

    def backward(self, grad):
        gx, gw, gb = fc_backward(self._x, self.params["w"], grad)
        self.grads = {"w": gw, "b": gb}
        return gx


class GlobalAvgPool(Module):
    def __init__(self, name="gap"):
        super().__init__()
        self.name = name

    def forward(self, x, phase="train"):
        out, self._shape = gap_forward(x)
        return out

    def backward(self, grad):
        return gap_backward(self._shape, grad)


class Norm(Module):
    """Whitening layer applied across channels; every pixel of the batch is a sample."""

    def __init__(self, spec, channels, name="norm"):
        super().__init__()
        self.name = name
        self.layer = WhiteningLayer(spec, channels)
        self.params = {k: v for k, v in vars(self.layer.params).items() if v is not None}

    @property
    def spec(self):
        return self.layer.spec

    @spec.setter
    def spec(self, value):
        self.layer.spec = value

    def _sync(self):
        for k, v in self.params.items():
            setattr(self.layer.params, k, v)

    def forward(self, x, phase="train"):
        self._sync()
        shape = x.shape
        cols = x.reshape(-1, shape[3]).T
        z = self.layer.forward(cols, phase)
        self._shape = shape
        return z.T.reshape(shape)

    def backward(self, grad):
        g = self.layer.backward(grad.reshape(-1, self._shape[3]).T)
        grads = {"gamma": g.grad_gamma, "bias": g.grad_bias}
        if "skew_upper" in self.params:
            grads["skew_upper"] = triangle_grad(g.grad_skew)
        self.grads = {k: v for k, v in grads.items() if k in self.params}
        return g.grad_x.T.reshape(self._shape)


@dataclass(frozen=True)
class ConvBlockSpec:
    fov: int
    stride: int
    ch_in: int
    ch_out: int
    norm: WhiteningSpec


def conv_block(block, rng, prefix):
    """Convolution, then ReLU, then the normalization layer."""
    return [
        Conv2d(block.fov, block.stride, block.ch_in, block.ch_out, rng, f"{prefix}.conv"),
        ReLU(f"{prefix}.relu"),
        Norm(block.norm, block.ch_out, f"{prefix}.norm"),
    ]


NET_BLOCKS = {
    "mnist": ((3, 1, 1, 16), (4, 2, 16, 64), (3, 1, 64, 128)),
    "svhn": ((3, 1, 3, 32), (4, 2, 32, 64), (3, 1, 64, 128)),
}
INPUT_SHAPES = {"mnist": (28, 28, 1), "svhn": (32, 32, 3)}
N_CLASSES = 10


class Net:
    """Sequential stack with named modules."""

    def __init__(self, modules, db=None):
        self.modules = list(modules)
        self.db = db
        names = [m.name for m in self.modules]
        if len(set(names)) != len(names):
            raise ValueError("module names must be unique")

    def forward(self, x, phase="train", check_finite=False):
        """Run the stack; with ``check_finite`` return the name of the first non-finite output.

        ``self.current`` names the module being evaluated, so a caller can
        attribute an exception raised mid-stack.
        """
        bad = None
        for m in self.modules:
            self.current = m.name
            x = m.forward(x, phase)
            if check_finite and bad is None and not np.all(np.isfinite(x)):
                bad = m.name
        return (x, bad) if check_finite else x

    def backward(self, grad):
        for m in reversed(self.modules):
            grad = m.backward(grad)
        return grad

    def named_params(self):
        for m in self.modules:
            for k, v in m.params.items():
                yield f"{m.name}.{k}", m, k, v

    def norm_layers(self):
        return [m for m in self.modules if isinstance(m, Norm)]

    def set_alpha(self, alpha):
        for m in self.norm_layers():
            m.spec = replace(m.spec, alpha=alpha)

    def shapes(self):
        return {name: v.shape for name, _, _, v in self.named_params()}


def build_net(db, norm="BN", seed=0):
    """Reference net for ``db`` with ``norm`` in every block's normalization slot."""
    if db not in NET_BLOCKS:
        raise ValueError(f"unknown database {db!r}; expected one of {sorted(NET_BLOCKS)}")
    spec = parse_spec(norm) if isinstance(norm, str) else norm
    rng = np.random.default_rng(seed)
    modules = []
    for i, (fov, stride, cin, cout) in enumerate(NET_BLOCKS[db], start=1):
        modules += conv_block(ConvBlockSpec(fov, stride, cin, cout, spec), rng, f"block{i}")
    modules += [GlobalAvgPool(), Linear(NET_BLOCKS[db][-1][3], N_CLASSES, rng)]
    return Net(modules, db)
