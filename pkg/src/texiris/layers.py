"""Neural network layers: convolution, batch norm, pooling, pixel shuffle, TEL.

The functional forms (``conv2d``, ``batch_norm``, ``pool2d`` ...) are graph
primitives with hand-written backward rules. The :class:`Module` subclasses
below hold parameters and buffers and call into them.

All 4-D activations are laid out as (batch, channels, height, width).
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DegenerateBatchError, DimensionError
from .tensor import Tensor, as_tensor, default_dtype

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out_extent(size, kernel, stride, padding, what):
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"{what}: extent {size} with kernel {kernel}, stride {stride}, "
            f"padding {padding} gives a non-integral output size"
        )
    return span // stride + 1


def _require_4d(x, what):
    if x.ndim != 4:
        raise DimensionError(f"{what} expects N x C x H x W input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# functional primitives
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding (no kernel flip)."""
    x = as_tensor(x)
    _require_4d(x, "conv2d")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if in_c != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel {weight.shape} expects {in_c}")
    ho = _out_extent(h, kh, stride, padding, "conv2d height")
    wo = _out_extent(w, kw, stride, padding, "conv2d width")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col in channel-major order: rows (C, kh, kw), columns (N, Ho, Wo)
    patches = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            patches[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    patches = patches.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(out_c, -1)
    out = (wmat @ patches).reshape(out_c, n, ho, wo)
    if bias is not None:
        out += bias.data.reshape(-1, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(out_c, n * ho * wo)
        gw = (gmat @ patches.T).reshape(weight.shape)
        gb = gmat.sum(axis=1) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch statistics are used and the running buffers
    (plain numpy arrays) are updated in place with an exponential moving
    average; the running variance tracks the unbiased estimate.
    """
    x = as_tensor(x)
    _require_4d(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels but gamma has shape {gamma.shape}")
    count = n * h * w
    shape = (1, c, 1, 1)
    if training:
        if count < 2:
            raise DegenerateBatchError("batch_norm in training mode needs N*H*W >= 2 per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (inv_std.reshape(shape) / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward, "batch_norm")


def _windows(x, kernel, stride, what):
    _require_4d(x, what)
    h, w = x.shape[2:]
    if kernel > h or kernel > w:
        raise ConfigurationError(f"{what}: kernel {kernel} larger than input {h}x{w}")
    if kernel < 1 or stride < 1:
        raise ConfigurationError(f"{what}: kernel and stride must be >= 1")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return win[:, :, :ho, :wo], ho, wo


def _scatter_windows(per_offset, shape, kernel, stride, ho, wo, dtype):
    gx = np.zeros(shape, dtype=dtype)
    for i in range(kernel):
        for j in range(kernel):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += per_offset(i, j)
    return gx


def _tiles(x, kernel, stride, what):
    """Non-overlapping k x k tiles as (N, C, Ho, Wo, k*k), or None if windows overlap."""
    if kernel != stride:
        return None
    _, ho, wo = _windows(x, kernel, stride, what)
    n, c = x.shape[:2]
    v = x.data[:, :, :ho * kernel, :wo * kernel].reshape(n, c, ho, kernel, wo, kernel)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel), ho, wo


def _untile(g_tiles, shape, kernel, ho, wo):
    n, c = shape[:2]
    g = g_tiles.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
    g = g.reshape(n, c, ho * kernel, wo * kernel)
    if g.shape == tuple(shape):
        return np.ascontiguousarray(g)
    gx = np.zeros(shape, dtype=g.dtype)
    gx[:, :, :ho * kernel, :wo * kernel] = g
    return gx


def max_pool2d(x, kernel=2, stride=2):
    """Window maximum; ties go to the first element in row-major order."""
    x = as_tensor(x)
    tiled = _tiles(x, kernel, stride, "max_pool2d")
    if tiled is None:
        win, ho, wo = _windows(x, kernel, stride, "max_pool2d")
        flat = win.reshape(*win.shape[:4], kernel * kernel)
    else:
        flat, ho, wo = tiled
    arg = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, arg, axis=-1)[..., 0]

    def backward(g):
        onehot = np.arange(kernel * kernel) == arg
        routed = g[..., None] * onehot
        if tiled is not None:
            return (_untile(routed, x.shape, kernel, ho, wo),)
        routed = routed.reshape(*g.shape, kernel, kernel)
        return (_scatter_windows(lambda i, j: routed[..., i, j], x.shape,
                                 kernel, stride, ho, wo, g.dtype),)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def energy_pool2d(x, kernel=2, stride=2):
    """Energy aware pooling: the mean of each k x k window.

    Window sums are accumulated in float64 and rounded once, so the result is
    the correctly rounded mean independent of summation order.
    """
    x = as_tensor(x)
    tiled = _tiles(x, kernel, stride, "energy_pool2d")
    if tiled is None:
        win, ho, wo = _windows(x, kernel, stride, "energy_pool2d")
        out = win.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)
    else:
        flat, ho, wo = tiled
        out = flat.mean(axis=-1, dtype=np.float64).astype(x.dtype)
    scale = 1.0 / (kernel * kernel)

    def backward(g):
        share = g * np.asarray(scale, dtype=g.dtype)
        if tiled is not None:
            spread = np.broadcast_to(share[..., None], share.shape + (kernel * kernel,))
            return (_untile(spread, x.shape, kernel, ho, wo),)
        return (_scatter_windows(lambda i, j: share, x.shape, kernel, stride, ho, wo, g.dtype),)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward, "energy_pool2d")


def pool2d(x, kind, kernel=2, stride=2):
    if kind == "max":
        return max_pool2d(x, kernel, stride)
    if kind == "eap":
        return energy_pool2d(x, kernel, stride)
    raise ConfigurationError(f"unknown pooling kind {kind!r} (expected 'max' or 'eap')")


def _shuffle(data, r):
    n, c, h, w = data.shape
    oc = c // (r * r)
    return data.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def _unshuffle(data, r):
    n, c, h, w = data.shape
    return data.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(
        n, c * r * r, h // r, w // r)


def pixel_shuffle(x, r):
    """out[n, c, y, x] = in[n, c*r*r + r*(y % r) + (x % r), y // r, x // r]."""
    x = as_tensor(x)
    _require_4d(x, "pixel_shuffle")
    if r < 1 or x.shape[1] % (r * r):
        raise ConfigurationError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^2={r * r}")
    return Tensor._make(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),), "pixel_shuffle")


def pixel_unshuffle(x, r):
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    _require_4d(x, "pixel_unshuffle")
    if r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ConfigurationError(f"pixel_unshuffle: spatial extent {x.shape[2:]} not divisible by {r}")
    return Tensor._make(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),), "pixel_unshuffle")


def texture_energy(x):
    """Texture energy layer: per-channel spatial mean, N x C x H x W -> N x C.

    Accumulated in float64 like :func:`energy_pool2d`.
    """
    x = as_tensor(x)
    _require_4d(x, "texture_energy")
    h, w = x.shape[2:]
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(g):
        share = g * np.asarray(1.0 / (h * w), dtype=g.dtype)
        return (np.broadcast_to(share[:, :, None, None], x.shape).copy(),)

    return Tensor._make(out, (x,), backward, "texture_energy")


def linear(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` with ``weight`` stored (out, in)."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        return gx, g.T @ x.data, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "linear")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)

    def backward(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def softmax(x, axis=-1):
    return log_softmax(x, axis).exp()


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

def kaiming_uniform(rng, shape, fan_in, dtype=None):
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype or default_dtype()),
                  requires_grad=True)


class Module:
    """Minimal container: named parameters, named buffers, train/eval mode."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        """Every parameter and buffer as a numpy array, keyed by dotted name."""
        state = OrderedDict((k, v.data) for k, v in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Sequential(Module):
    def __init__(self, *layers):
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        self._n = len(layers)

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        return getattr(self, str(i % self._n))

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None):
        if stride < 1 or padding < 0 or kernel < 1:
            raise ConfigurationError("conv2d: kernel, stride >= 1 and padding >= 0 required")
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.weight = kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.bias = Tensor.zeros(out_channels, requires_grad=True)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.gamma = Tensor.ones(channels, requires_grad=True)
        self.beta = Tensor.zeros(channels, requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())
        self.eps, self.momentum = eps, momentum

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class ReLU(Module):
    def forward(self, x):
        return x.relu()


@dataclass(frozen=True)
class PoolSpec:
    kind: str = "max"
    kernel: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.kind not in ("max", "eap"):
            raise ConfigurationError(f"unknown pooling kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigurationError("pooling kernel and stride must be >= 1")


class Pool2d(Module):
    def __init__(self, spec: PoolSpec):
        self.spec = spec

    def forward(self, x):
        return pool2d(x, self.spec.kind, self.spec.kernel, self.spec.stride)


class PixelShuffle(Module):
    def __init__(self, factor=2):
        self.factor = factor

    def forward(self, x):
        return pixel_shuffle(x, self.factor)


class TextureEnergy(Module):
    def forward(self, x):
        return texture_energy(x)


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = kaiming_uniform(rng, (out_features, in_features), in_features)
        self.bias = Tensor.zeros(out_features, requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)
