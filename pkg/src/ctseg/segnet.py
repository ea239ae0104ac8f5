"""Dilated residual segmentation network (20 convolutions with defaults).

Layer plan::

    stem   3x3 conv, dilation 1
    group  for dilation in (1, 2, 4): ``blocks_per_group`` pre-activation
           residual blocks  BN-ReLU-conv-BN-ReLU-conv  + identity skip
    head   BN-ReLU, 1x1 conv to ``num_classes``, softmax over channels

Skips that change width zero-pad the extra channels instead of projecting.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import engine, kernels
from .engine import ConvKernel
from .errors import ConfigError, FormatError, ShapeError

DILATIONS = (1, 2, 4)
MAGIC = b"CTSEG1\0"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    num_classes: int = 2
    group_channels: tuple = (16, 32, 64)
    blocks_per_group: int = 3
    kernel: int = 3
    seed: int = 0

    def validate(self):
        if len(self.group_channels) != len(DILATIONS):
            raise ConfigError("group_channels needs one width per dilation group (3)")
        if any(int(c) < 1 for c in self.group_channels):
            raise ConfigError("channel widths must be positive")
        if any(self.group_channels[i] > self.group_channels[i + 1] for i in range(2)):
            raise ConfigError("group widths must be non-decreasing (skips only zero-pad channels)")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")
        if self.blocks_per_group < 1:
            raise ConfigError("blocks_per_group must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel extent must be odd")
        return self

    @property
    def conv_layers(self):
        return 2 + 2 * len(DILATIONS) * self.blocks_per_group


def block_names(config):
    """(prefix, in_channels, out_channels, dilation) for every residual block."""
    out = []
    width = config.group_channels[0]
    for g, (c, d) in enumerate(zip(config.group_channels, DILATIONS), start=1):
        for b in range(1, config.blocks_per_group + 1):
            out.append((f"g{g}.b{b}", width, c, d))
            width = c
    return out


class ModelParams:
    """Ordered name -> array mapping plus the config that produced it.

    Names ending in ``running_mean``/``running_var`` are batch-norm buffers;
    everything else is trainable.
    """

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def trainable(self):
        return {k: v for k, v in self.tensors.items() if not _is_buffer(k)}

    def conv_weight_names(self):
        return [k for k in self.tensors if k.endswith(".w")]

    def num_trainable(self):
        return int(sum(v.size for v in self.trainable().values()))

    def replace(self, updates):
        merged = dict(self.tensors)
        merged.update(updates)
        return ModelParams(self.config, merged)

    def astype(self, dtype):
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def equal(self, other):
        return (
            self.config == other.config
            and self.names() == other.names()
            and all(np.array_equal(self[k], other[k]) and self[k].dtype == other[k].dtype for k in self.tensors)
        )


def _is_buffer(name):
    return name.endswith(".running_mean") or name.endswith(".running_var")


def build(config=None, dtype=np.float64):
    """Initialise parameters: He-normal (fan-in) conv weights, zero biases, BN identity."""
    config = (config or NetConfig()).validate()
    rng = np.random.default_rng(config.seed)
    k = config.kernel
    tensors = {}

    def conv(prefix, c_in, c_out, ksize):
        fan_in = c_in * ksize * ksize
        tensors[prefix + ".w"] = (rng.standard_normal((c_out, c_in, ksize, ksize)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        tensors[prefix + ".b"] = np.zeros(c_out, dtype=dtype)

    def bn(prefix, c):
        tensors[prefix + ".gamma"] = np.ones(c, dtype=dtype)
        tensors[prefix + ".beta"] = np.zeros(c, dtype=dtype)
        tensors[prefix + ".running_mean"] = np.zeros(c, dtype=dtype)
        tensors[prefix + ".running_var"] = np.ones(c, dtype=dtype)

    conv("stem.conv", config.in_channels, config.group_channels[0], k)
    for prefix, c_in, c_out, _ in block_names(config):
        bn(prefix + ".bn1", c_in)
        conv(prefix + ".conv1", c_in, c_out, k)
        bn(prefix + ".bn2", c_out)
        conv(prefix + ".conv2", c_out, c_out, k)
    bn("head.bn", config.group_channels[-1])
    conv("head.conv", config.group_channels[-1], config.num_classes, 1)
    return ModelParams(config, tensors)


# ----------------------------------------------------------------------------
# forward / backward
# ----------------------------------------------------------------------------


def _kernel(params, prefix, dilation):
    return ConvKernel(params[prefix + ".w"], dilation, params[prefix + ".b"])


@dataclass
class _NormStats:
    mean: np.ndarray
    invstd: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    train: bool


def _bn_relu(params, prefix, x, mode, running):
    """Batch-norm followed by ReLU, fused; records updated running stats."""
    gamma = params[prefix + ".gamma"].astype(np.float64)
    beta = params[prefix + ".beta"].astype(np.float64)
    if mode == "train":
        mean, var = kernels.channel_stats(x)
        m = engine.BN_MOMENTUM
        rm = params[prefix + ".running_mean"]
        rv = params[prefix + ".running_var"]
        running[prefix + ".running_mean"] = (m * rm + (1.0 - m) * mean).astype(rm.dtype)
        running[prefix + ".running_var"] = (m * rv + (1.0 - m) * var).astype(rv.dtype)
    else:
        mean = params[prefix + ".running_mean"].astype(np.float64)
        var = params[prefix + ".running_var"].astype(np.float64)
    invstd = 1.0 / np.sqrt(var + engine.BN_EPS)
    scale, shift = kernels.bn_scale_shift(mean, invstd, gamma, beta, x.dtype)
    stats = _NormStats(mean, invstd, scale, shift, mode == "train")
    return kernels.affine_relu(x, scale, shift), stats


def _bn_relu_backward(params, prefix, g, x, stats, grads):
    gx, dgamma, dbeta = kernels.bn_relu_backward(
        g, x, stats.scale, stats.shift, stats.mean, stats.invstd, stats.train
    )
    dtype = params[prefix + ".gamma"].dtype
    grads[prefix + ".gamma"] = dgamma.astype(dtype)
    grads[prefix + ".beta"] = dbeta.astype(dtype)
    return gx


def _pad_channels(x, c_out):
    c_in = x.shape[1]
    if c_in == c_out:
        return x
    pad = np.zeros((x.shape[0], c_out - c_in) + x.shape[2:], dtype=x.dtype)
    return np.concatenate([x, pad], axis=1)


def residual_block(params, prefix, x, c_out, dilation, mode, running=None):
    """One pre-activation residual block; returns ``(out, cache)``."""
    running = {} if running is None else running
    a1, st1 = _bn_relu(params, prefix + ".bn1", x, mode, running)
    h1 = engine.conv2d_forward(a1, _kernel(params, prefix + ".conv1", dilation))
    del a1
    a2, st2 = _bn_relu(params, prefix + ".bn2", h1, mode, running)
    out = engine.conv2d_forward(a2, _kernel(params, prefix + ".conv2", dilation))
    del a2
    out += _pad_channels(x, c_out)
    return out, (x, h1, st1, st2)


def _residual_block_backward(params, prefix, g_out, cache, dilation, grads):
    x, h1, st1, st2 = cache
    # conv inputs are recomputed from the cached block input and mid tensor
    a2 = kernels.affine_relu(h1, st2.scale, st2.shift)
    g_a2, grads[prefix + ".conv2.w"], grads[prefix + ".conv2.b"] = engine.conv2d_backward(
        a2, _kernel(params, prefix + ".conv2", dilation), g_out
    )
    del a2
    g_h1 = _bn_relu_backward(params, prefix + ".bn2", g_a2, h1, st2, grads)
    del g_a2
    a1 = kernels.affine_relu(x, st1.scale, st1.shift)
    g_a1, grads[prefix + ".conv1.w"], grads[prefix + ".conv1.b"] = engine.conv2d_backward(
        a1, _kernel(params, prefix + ".conv1", dilation), g_h1
    )
    del a1, g_h1
    g_x = _bn_relu_backward(params, prefix + ".bn1", g_a1, x, st1, grads)
    g_x += g_out[:, : x.shape[1]]
    return g_x


class ForwardCache:
    """Activations kept by :func:`forward` for :func:`backward`."""

    def __init__(self):
        self.stem_in = None
        self.blocks = []
        self.head_in = None
        self.head_stats = None
        self.probs = None
        self.running = {}


def forward(params, batch, mode="infer", return_cache=False):
    """Class-probability maps N x num_classes x H x W.

    In train mode batch statistics are used; the updated running statistics
    are returned on the cache (``cache.running``), never written into
    ``params``.
    """
    config = params.config
    x = batch.data if isinstance(batch, engine.Tensor4) else np.asarray(batch)
    if x.ndim != 4:
        raise ShapeError(f"batch must be N x C x H x W, got {x.shape}")
    if x.shape[1] != config.in_channels:
        raise ShapeError(f"batch has {x.shape[1]} channels, network expects {config.in_channels}")
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown mode {mode!r}")
    x = np.ascontiguousarray(x, dtype=params["stem.conv.w"].dtype)
    cache = ForwardCache()
    cache.stem_in = x
    h = engine.conv2d_forward(x, _kernel(params, "stem.conv", 1))
    for prefix, _, c_out, d in block_names(config):
        h, block_cache = residual_block(params, prefix, h, c_out, d, mode, cache.running)
        if return_cache:
            cache.blocks.append(block_cache)
    a, head_stats = _bn_relu(params, "head.bn", h, mode, cache.running)
    logits = engine.conv2d_forward(a, _kernel(params, "head.conv", 1))
    del a
    probs = engine.softmax_channels(logits)
    if return_cache:
        cache.head_in = h
        cache.head_stats = head_stats
        cache.probs = probs
        return probs, cache
    return probs


def backward(params, cache, grad_probs):
    """Gradients of a scalar loss w.r.t. every trainable parameter.

    ``grad_probs`` is dLoss/dProbs for the probabilities of the cached
    forward pass.
    """
    config = params.config
    grads = {}
    g_logits = engine.softmax_backward(cache.probs, grad_probs).astype(cache.probs.dtype, copy=False)
    st = cache.head_stats
    a = kernels.affine_relu(cache.head_in, st.scale, st.shift)
    g_a, grads["head.conv.w"], grads["head.conv.b"] = engine.conv2d_backward(
        a, _kernel(params, "head.conv", 1), g_logits
    )
    del a
    g_h = _bn_relu_backward(params, "head.bn", g_a, cache.head_in, st, grads)
    for (prefix, _, _, d), block_cache in zip(reversed(block_names(config)), reversed(cache.blocks)):
        g_h = _residual_block_backward(params, prefix, g_h, block_cache, d, grads)
    _, grads["stem.conv.w"], grads["stem.conv.b"] = engine.conv2d_backward(
        cache.stem_in, _kernel(params, "stem.conv", 1), g_h
    )
    return {name: grads[name] for name in params.trainable()}


def predict_mask(probs, lung_channel=1):
    """Lung label where p_lung > 0.5 (an exact 0.5 tie is background).

    Returns an N x H x W boolean array, one 2D mask per slice.
    """
    p = probs.data if isinstance(probs, engine.Tensor4) else np.asarray(probs)
    return p[:, lung_channel] > 0.5


def parameter_count(config):
    """Trainable parameter count of the layer plan (conv weights+biases, BN gamma+beta)."""
    config = config.validate()
    k2 = config.kernel * config.kernel
    total = config.group_channels[0] * config.in_channels * k2 + config.group_channels[0]
    for _, c_in, c_out, _ in block_names(config):
        total += 2 * c_in + c_out * c_in * k2 + c_out
        total += 2 * c_out + c_out * c_out * k2 + c_out
    c_last = config.group_channels[-1]
    total += 2 * c_last + config.num_classes * c_last + config.num_classes
    return total


# ----------------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------------


def save_checkpoint(params, path):
    """Write ``params`` as a CTSEG1 container (little-endian float32 payload)."""
    c = params.config
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<5i", c.in_channels, c.num_classes, *c.group_channels)
    out += struct.pack("<iiq", c.blocks_per_group, c.kernel, c.seed)
    out += struct.pack("<I", len(params))
    for name, arr in params:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise FormatError(f"{path}: not a CTSEG1 checkpoint")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    in_ch, n_cls, c1, c2, c3 = take("<5i")
    blocks, kernel, seed = take("<iiq")
    config = NetConfig(in_ch, n_cls, (c1, c2, c3), blocks, kernel, seed)
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<I")
        name = bytes(take(f"<{n}s")[0]).decode("utf-8")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = 4 * size
        if pos + nbytes > len(buf):
            raise FormatError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += nbytes
        tensors[name] = arr.astype(dtype)
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after tensor list")
    return ModelParams(config, tensors)
