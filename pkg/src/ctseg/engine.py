"""Minimal differentiable array engine for the segmentation network.

Every op is a pure function on NCHW numpy arrays with a hand-written adjoint.
There is no tape: the network module strings forward and backward calls
together explicitly.  Inputs may be :class:`Tensor4` instances or plain
arrays; results are plain arrays in the input dtype.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, NumericsError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
DICE_SMOOTH = 1e-5


def default_dtype():
    """float64 unless ``CTSEG_PRECISION=32`` selects the 32-bit training path."""
    if os.environ.get("CTSEG_PRECISION", "64").strip() == "32":
        return np.float32
    return np.float64


@dataclass
class Tensor4:
    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ShapeError(f"Tensor4 needs four positive extents, got {self.data.shape}")
        if self.grad is not None:
            self.grad = np.asarray(self.grad)
            if self.grad.shape != self.data.shape:
                raise ShapeError("grad shape differs from data shape")

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


@dataclass
class ConvKernel:
    weights: np.ndarray
    dilation: int = 1
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 4:
            raise ShapeError("kernel weights must be Cout x Cin x Kh x Kw")
        kh, kw = self.weights.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel extent must be odd, got {kh}x{kw}")
        if int(self.dilation) < 1:
            raise ConfigError("dilation must be a positive integer")
        self.dilation = int(self.dilation)
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.weights.shape[0],):
                raise ShapeError("bias length must equal Cout")


def _arr(x):
    return x.data if isinstance(x, Tensor4) else np.asarray(x)


def _check4(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be N x C x H x W, got shape {x.shape}")


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------


def conv2d_forward(input, kernel):
    """Stride-1 dilated convolution with zero same-padding."""
    x = _arr(input)
    _check4(x)
    w = kernel.weights
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    out = kernels.conv2d(x, w, kernel.dilation)
    if kernel.bias is not None:
        out += kernel.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def conv2d_backward(input, kernel, grad_out):
    """Adjoints of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    x = _arr(input)
    g = _arr(grad_out)
    _check4(x)
    _check4(g, "grad_out")
    w = kernel.weights
    c_out, c_in, kh, kw = w.shape
    n, c, h, wd = x.shape
    if c != c_in or g.shape != (n, c_out, h, wd):
        raise ShapeError(f"grad_out shape {g.shape} inconsistent with input {x.shape} and kernel {w.shape}")
    gx = kernels.conv2d_grad_input(g, w, kernel.dilation)
    gw = kernels.conv2d_grad_weight(x, g, kh, kw, kernel.dilation).astype(w.dtype)
    gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(w.dtype)
    return gx, gw, gb


# ----------------------------------------------------------------------------
# batch normalisation
# ----------------------------------------------------------------------------


@dataclass
class BatchNormCache:
    mean: np.ndarray
    invstd: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    mode: str = "train"


def batchnorm(input, gamma, beta, mode, running_mean, running_var, momentum=BN_MOMENTUM):
    """Per-channel normalisation.

    Returns ``(out, cache)``; ``cache.running_mean``/``cache.running_var`` hold
    the updated statistics (train mode) or the unchanged ones (infer mode).
    The inputs are never modified.
    """
    x = _arr(input)
    _check4(x)
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise ShapeError("batchnorm needs a non-empty N x H x W extent")
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta length must equal channel count")
    running_mean = np.asarray(running_mean)
    running_var = np.asarray(running_var)
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + BN_EPS)
        new_mean = momentum * running_mean + (1.0 - momentum) * mean
        new_var = momentum * running_var + (1.0 - momentum) * var
        scale = (gamma * invstd).astype(x.dtype, copy=False)
        out = centered * scale[None, :, None, None] + beta.astype(x.dtype, copy=False)[None, :, None, None]
        return out, BatchNormCache(mean, invstd, new_mean, new_var, "train")
    if mode == "infer":
        invstd = 1.0 / np.sqrt(running_var + BN_EPS)
        scale = (gamma * invstd).astype(x.dtype, copy=False)
        shift = (beta - running_mean * gamma * invstd).astype(x.dtype, copy=False)
        out = x * scale[None, :, None, None] + shift[None, :, None, None]
        return out, BatchNormCache(running_mean, invstd, running_mean, running_var, "infer")
    raise ConfigError(f"unknown batchnorm mode {mode!r}")


def batchnorm_backward(grad_out, input, gamma, cache):
    """Returns (grad_input, grad_gamma, grad_beta)."""
    g = _arr(grad_out)
    x = _arr(input)
    gamma = np.asarray(gamma)
    xhat = (x - cache.mean.astype(x.dtype, copy=False)[None, :, None, None]) * cache.invstd.astype(
        x.dtype, copy=False
    )[None, :, None, None]
    dbeta = g.sum(axis=(0, 2, 3))
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * cache.invstd).astype(x.dtype, copy=False)[None, :, None, None]
    if cache.mode == "infer":
        return g * scale, dgamma, dbeta
    m = x.shape[0] * x.shape[2] * x.shape[3]
    gx = scale * (g - (dbeta / m).astype(x.dtype, copy=False)[None, :, None, None]
                  - xhat * (dgamma / m).astype(x.dtype, copy=False)[None, :, None, None])
    return gx, dgamma, dbeta


# ----------------------------------------------------------------------------
# activations, softmax, loss
# ----------------------------------------------------------------------------


def relu(input):
    x = _arr(input)
    return np.maximum(x, 0)


def relu_backward(grad_out, input):
    # subgradient 0 at x == 0
    x = _arr(input)
    return np.where(x > 0, _arr(grad_out), 0).astype(x.dtype, copy=False)


def softmax_channels(logits):
    z = _arr(logits)
    _check4(z, "logits")
    if z.shape[1] < 2:
        raise ShapeError("softmax over channels needs C >= 2")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs, grad_probs):
    p = _arr(probs)
    gp = _arr(grad_probs)
    return p * (gp - (p * gp).sum(axis=1, keepdims=True))


def _dice_terms(probs, target):
    p = _arr(probs)
    g = _arr(target)
    if p.shape != g.shape:
        raise ShapeError(f"probs {p.shape} and target {g.shape} differ")
    axes = tuple(i for i in range(p.ndim) if i != 1) if p.ndim > 1 else None
    inter = (p * g).sum(axis=axes, dtype=np.float64)
    denom = p.sum(axis=axes, dtype=np.float64) + g.sum(axis=axes, dtype=np.float64)
    return p, g, np.atleast_1d(inter), np.atleast_1d(denom)


def dice_ns_loss(probs, target_onehot):
    """Soft Dice loss with plain (non-squared) sums in the denominator.

    ``1 - mean_c (2*sum(p*g) + s) / (sum(p) + sum(g) + s)`` with sums taken
    over every axis except the channel axis (axis 1).
    """
    _, _, inter, denom = _dice_terms(probs, target_onehot)
    ratio = (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return float(1.0 - ratio.mean())


def dice_ns_grad(probs, target_onehot):
    p, g, inter, denom = _dice_terms(probs, target_onehot)
    c = inter.size
    d = denom + DICE_SMOOTH
    a = (2.0 / (c * d)).astype(p.dtype)
    b = ((2.0 * inter + DICE_SMOOTH) / (c * d * d)).astype(p.dtype)
    shape = [1] * p.ndim
    if p.ndim > 1:
        shape[1] = c
    return -(g * a.reshape(shape)) + b.reshape(shape) * np.ones_like(p)


# ----------------------------------------------------------------------------
# Adam with coupled L2
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One Adam update.  Returns ``(new_params, new_state)``; inputs untouched.

    Only the names present in ``grads`` are updated; other entries of
    ``params`` are passed through.  L2 regularisation is folded into the
    gradient before the moment updates.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}", param=name)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params = dict(params)
    new_m = dict(state.m)
    new_v = dict(state.v)
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape for {name!r} does not match parameter")
        g = g.astype(theta.dtype, copy=False)
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = new_m.get(name)
        v = new_v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params[name] = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(state.lr, b1, b2, state.epsilon, state.weight_decay, t, new_m, new_v)
    return new_params, new_state
