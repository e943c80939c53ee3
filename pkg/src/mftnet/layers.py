"""Network layers: temporal/depthwise/separable convolutions, batch and layer
normalization, multi-head self-attention, pooling, dropout, and the max-norm
dense head. Every layer is gradient-checkable against central differences.

Tensor layout convention for convolutional stages: ``[batch, electrodes,
time, feature_maps]``. Attention operates on token sequences ``[batch,
time, features]``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .tensor import Tensor, ShapeError


# ----------------------------------------------------------------------
# initialization
# ----------------------------------------------------------------------
def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Gaussian draws with |z| > 2*std resampled (keeps kernels bounded)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def fan_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return truncated_normal(rng, shape, std)


class Layer:
    """Base: a named bag of trainable tensors plus non-trainable buffers."""

    def parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []


# ----------------------------------------------------------------------
# convolution cores (custom ops, tap-loop implementation)
# ----------------------------------------------------------------------
def _temporal_conv_op(x: Tensor, kernel: Tensor, pad_left: int, pad_right: int) -> Tensor:
    """Cross-correlation along time. x [B,C,T,Fin], kernel [k,Fin,Fout]."""
    b, c, t, f_in = x.shape
    k = kernel.shape[0]
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right), (0, 0)))
    out_data = np.zeros((b, c, t, kernel.shape[2]), dtype=x.data.dtype)
    for dt in range(k):
        out_data += xpad[:, :, dt:dt + t, :] @ kernel.data[dt]

    def bwd():
        g = out.grad
        gk = np.zeros_like(kernel.data)
        gxpad = np.zeros_like(xpad)
        for dt in range(k):
            window = xpad[:, :, dt:dt + t, :]
            gk[dt] = np.einsum("bctf,bctg->fg", window, g)
            gxpad[:, :, dt:dt + t, :] += g @ kernel.data[dt].T
        tz._accum(kernel, gk)
        tz._accum(x, gxpad[:, :, pad_left:pad_left + t, :])

    out = Tensor._result(out_data, (x, kernel), bwd)
    return out


def _depthwise_spatial_op(x: Tensor, kernel: Tensor) -> Tensor:
    """Collapse the electrode axis. x [B,C,T,F], kernel [C,F,D] -> [B,1,T,F*D]."""
    b, c, t, f = x.shape
    d = kernel.shape[2]
    out4 = np.einsum("bctf,cfd->btfd", x.data, kernel.data)
    out_data = out4.reshape(b, 1, t, f * d)

    def bwd():
        g4 = out.grad.reshape(b, t, f, d)
        tz._accum(kernel, np.einsum("bctf,btfd->cfd", x.data, g4))
        tz._accum(x, np.einsum("btfd,cfd->bctf", g4, kernel.data))

    out = Tensor._result(out_data, (x, kernel), bwd)
    return out


def _depthwise_temporal_op(x: Tensor, kernel: Tensor, pad_left: int, pad_right: int) -> Tensor:
    """One time-axis kernel per feature map. x [B,1,T,F], kernel [k,F]."""
    b, c, t, f = x.shape
    k = kernel.shape[0]
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right), (0, 0)))
    out_data = np.zeros_like(x.data)
    for dt in range(k):
        out_data += xpad[:, :, dt:dt + t, :] * kernel.data[dt]

    def bwd():
        g = out.grad
        gk = np.zeros_like(kernel.data)
        gxpad = np.zeros_like(xpad)
        for dt in range(k):
            gk[dt] = (xpad[:, :, dt:dt + t, :] * g).sum(axis=(0, 1, 2))
            gxpad[:, :, dt:dt + t, :] += g * kernel.data[dt]
        tz._accum(kernel, gk)
        tz._accum(x, gxpad[:, :, pad_left:pad_left + t, :])

    out = Tensor._result(out_data, (x, kernel), bwd)
    return out


class TemporalConv(Layer):
    """1D conv along time, weights shared across electrode rows, no bias.

    Kernel lengths must be odd so that "same" zero-padding is symmetric.
    """

    def __init__(self, kernel_len: int, in_maps: int, out_maps: int,
                 rng: np.random.Generator, name: str = "temporal_conv"):
        if kernel_len % 2 == 0:
            raise ValueError(f"{name}: kernel length must be odd, got {kernel_len}")
        self.name = name
        self.kernel_len = kernel_len
        self.kernel = Tensor(
            fan_init(rng, (kernel_len, in_maps, out_maps),
                     fan_in=kernel_len * in_maps, fan_out=kernel_len * out_maps),
            requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected [B,C,T,F] input, got {x.shape}")
        if self.kernel_len > x.shape[2]:
            raise ShapeError(
                f"{self.name}: kernel length {self.kernel_len} exceeds signal length {x.shape[2]}")
        pad = self.kernel_len // 2
        return _temporal_conv_op(x, self.kernel, pad, pad)

    def parameters(self):
        return [(f"{self.name}.kernel", self.kernel)]


class SpatialDepthwiseConv(Layer):
    """Depthwise conv spanning all electrodes (kernel C x 1), no bias."""

    def __init__(self, n_channels: int, in_maps: int, depth: int,
                 rng: np.random.Generator, name: str = "depthwise_conv"):
        if depth < 1:
            raise ValueError(f"{name}: depth multiplier must be >= 1, got {depth}")
        self.name = name
        self.n_channels = n_channels
        self.depth = depth
        self.kernel = Tensor(
            fan_init(rng, (n_channels, in_maps, depth),
                     fan_in=n_channels, fan_out=depth),
            requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.n_channels:
            raise ShapeError(
                f"{self.name}: expected {self.n_channels} electrode rows, got input {x.shape}")
        return _depthwise_spatial_op(x, self.kernel)

    def parameters(self):
        return [(f"{self.name}.kernel", self.kernel)]


class SeparableTemporalConv(Layer):
    """Depthwise 1 x k time conv followed by a 1 x 1 pointwise projection.

    With the default even kernel (16) the "same" padding is asymmetric:
    7 zeros before, 8 after.
    """

    def __init__(self, kernel_len: int, in_maps: int, out_maps: int,
                 rng: np.random.Generator, name: str = "separable_conv"):
        self.name = name
        self.kernel_len = kernel_len
        self.depthwise = Tensor(
            fan_init(rng, (kernel_len, in_maps), fan_in=kernel_len, fan_out=kernel_len),
            requires_grad=True)
        self.pointwise = Tensor(
            fan_init(rng, (in_maps, out_maps), fan_in=in_maps, fan_out=out_maps),
            requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] < self.kernel_len:
            raise ShapeError(
                f"{self.name}: signal length {x.shape[2]} shorter than kernel {self.kernel_len}")
        pad_left = (self.kernel_len - 1) // 2
        pad_right = self.kernel_len // 2
        h = _depthwise_temporal_op(x, self.depthwise, pad_left, pad_right)
        return h @ self.pointwise

    def parameters(self):
        return [(f"{self.name}.depthwise", self.depthwise),
                (f"{self.name}.pointwise", self.pointwise)]


# ----------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------
class BatchNorm(Layer):
    """Per-feature-map batch normalization over (batch, electrode, time).

    Running moments follow the Keras/EEGNet convention: momentum 0.99,
    eps 1e-3, biased batch variance, updated only in training mode.
    """

    def __init__(self, n_maps: int, momentum: float = 0.99, eps: float = 1e-3,
                 name: str = "batch_norm"):
        self.name = name
        self.n_maps = n_maps
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(n_maps), requires_grad=True)
        self.beta = Tensor(np.zeros(n_maps), requires_grad=True)
        self.running_mean = np.zeros(n_maps, dtype=tz.get_dtype())
        self.running_var = np.ones(n_maps, dtype=tz.get_dtype())

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 4 or x.shape[3] != self.n_maps:
            raise ShapeError(f"{self.name}: expected [B,C,T,{self.n_maps}], got {x.shape}")
        if training:
            mean = x.mean(axis=(0, 1, 2), keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=(0, 1, 2), keepdims=True)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean.data.reshape(-1)
            self.running_var = m * self.running_var + (1 - m) * var.data.reshape(-1)
            norm = centered / tz.sqrt(var + self.eps * np.ones(1, dtype=x.dtype))
        else:
            rm = Tensor(self.running_mean.astype(x.dtype))
            rv = Tensor((self.running_var + self.eps).astype(x.dtype))
            norm = (x - rm) / tz.sqrt(rv)
        return norm * self.gamma + self.beta

    def parameters(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]


class LayerNorm(Layer):
    """Zero-mean / unit-variance over the last axis, then affine. eps 1e-5."""

    def __init__(self, dim: int, eps: float = 1e-5, name: str = "layer_norm"):
        self.name = name
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: expected last axis {self.dim}, got {x.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        norm = centered / tz.sqrt(var + self.eps * np.ones(1, dtype=x.dtype))
        return norm * self.gamma + self.beta

    def parameters(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]


# ----------------------------------------------------------------------
# attention
# ----------------------------------------------------------------------
class MultiHeadAttention(Layer):
    """Scaled dot-product self-attention over time-step tokens.

    All four projections (query/key/value/output) carry biases; per-head
    dimension is dim/heads. The softmaxed attention weights of the most
    recent forward pass are kept on ``last_attention`` for inspection.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 name: str = "attention"):
        if dim % heads != 0:
            raise ShapeError(f"{name}: dim {dim} not divisible by {heads} heads")
        self.name = name
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads

        def proj():
            return (Tensor(fan_init(rng, (dim, dim), dim, dim), requires_grad=True),
                    Tensor(np.zeros(dim), requires_grad=True))

        self.wq, self.bq = proj()
        self.wk, self.bk = proj()
        self.wv, self.bv = proj()
        self.wo, self.bo = proj()
        self.last_attention: np.ndarray | None = None

    def _split_heads(self, x: Tensor, b: int, t: int) -> Tensor:
        return x.reshape(b, t, self.heads, self.head_dim).transpose((0, 2, 1, 3))

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.ndim != 3 or tokens.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: expected [B,T,{self.dim}] tokens, got {tokens.shape}")
        b, t, _ = tokens.shape
        q = self._split_heads(tokens @ self.wq + self.bq, b, t)
        k = self._split_heads(tokens @ self.wk + self.bk, b, t)
        v = self._split_heads(tokens @ self.wv + self.bv, b, t)
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        att = tz.softmax(scores, axis=-1)
        self.last_attention = att.data
        mixed = (att @ v).transpose((0, 2, 1, 3)).reshape(b, t, self.dim)
        return mixed @ self.wo + self.bo

    def parameters(self):
        n = self.name
        return [(f"{n}.wq", self.wq), (f"{n}.bq", self.bq),
                (f"{n}.wk", self.wk), (f"{n}.bk", self.bk),
                (f"{n}.wv", self.wv), (f"{n}.bv", self.bv),
                (f"{n}.wo", self.wo), (f"{n}.bo", self.bo)]


# ----------------------------------------------------------------------
# dense head
# ----------------------------------------------------------------------
class Dense(Layer):
    """Affine map. With ``max_norm`` set, each unit's incoming-weight vector
    is projected back onto the L2 ball of that radius after optimizer steps.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 max_norm: float | None = None, name: str = "dense"):
        self.name = name
        self.max_norm = max_norm
        self.weight = Tensor(fan_init(rng, (in_dim, out_dim), in_dim, out_dim),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def project_max_norm(self) -> None:
        if self.max_norm is None:
            return
        norms = np.sqrt((self.weight.data ** 2).sum(axis=0, keepdims=True))
        factor = np.minimum(1.0, self.max_norm / np.maximum(norms, 1e-12))
        self.weight.data = self.weight.data * factor

    def unit_norms(self) -> np.ndarray:
        return np.sqrt((self.weight.data ** 2).sum(axis=0))

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]


# ----------------------------------------------------------------------
# stateless pieces
# ----------------------------------------------------------------------
def avg_pool_time(x: Tensor, pool: int) -> Tensor:
    """Non-overlapping mean pooling along time; trailing remainder dropped."""
    b, c, t, f = x.shape
    if pool > t:
        raise ShapeError(f"avg_pool: window {pool} exceeds signal length {t}")
    t_out = t // pool
    trimmed = x[:, :, :t_out * pool, :]
    return trimmed.reshape(b, c, t_out, pool, f).mean(axis=3)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool, spatial: bool = False) -> Tensor:
    """Inverted dropout. Spatial style zeroes whole feature maps per trial."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if spatial:
        mask_shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (x.shape[-1],)
    else:
        mask_shape = x.shape
    keep = (rng.random(mask_shape) >= rate).astype(x.dtype)
    return x * Tensor(keep * (1.0 / (1.0 - rate)))


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


elu = tz.elu
gelu = tz.gelu
softmax = tz.softmax
