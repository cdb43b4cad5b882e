"""SSIM reconstruction loss and cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, DimensionError
from .layers import log_softmax
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigurationError(f"SSIM window must be odd and >= 3, got {self.window}")
        if self.sigma <= 0 or self.dynamic_range <= 0:
            raise ConfigurationError("SSIM sigma and dynamic range must be positive")

    @property
    def c1(self):
        return (0.01 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (0.03 * self.dynamic_range) ** 2

    def kernel(self):
        offsets = np.arange(self.window) - self.window // 2
        g = np.exp(-(offsets ** 2) / (2.0 * self.sigma ** 2))
        return g / g.sum()


def correlate_valid(x, kernel, axis):
    """1-D valid cross-correlation of ``x`` with ``kernel`` along ``axis``."""
    k = len(kernel)
    axis = axis % x.ndim
    n_out = x.shape[axis] - k + 1
    win = sliding_window_view(x.data, k, axis=axis)
    out = win @ kernel.astype(x.dtype)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        index = [slice(None)] * x.ndim
        for i in range(k):
            index[axis] = slice(i, i + n_out)
            gx[tuple(index)] += kernel[i] * g
        return (gx,)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward, "correlate_valid")


def _as_batch(t):
    if t.ndim == 2:
        return t.reshape(1, 1, *t.shape)
    if t.ndim == 3:
        return t.reshape(t.shape[0], 1, *t.shape[1:])
    if t.ndim == 4 and t.shape[1] == 1:
        return t
    raise DimensionError(f"SSIM expects single-channel images, got shape {t.shape}")


def ssim_map(a, b, cfg=SsimConfig()):
    """Local SSIM values over all valid (unpadded) Gaussian windows.

    Statistics are accumulated in 64-bit regardless of the input precision;
    inputs are clamped to [0, dynamic_range] first.
    """
    a, b = _as_batch(as_tensor(a)), _as_batch(as_tensor(b))
    if a.shape != b.shape:
        raise DimensionError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape[2:]) < cfg.window:
        raise ConfigurationError(f"image {a.shape[2:]} smaller than SSIM window {cfg.window}")
    kernel = cfg.kernel()
    x = a.clip(0.0, cfg.dynamic_range).astype(np.float64)
    y = b.clip(0.0, cfg.dynamic_range).astype(np.float64)

    def blur(t):
        return correlate_valid(correlate_valid(t, kernel, 2), kernel, 3)

    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = blur(x * x) - mu_xx
    var_y = blur(y * y) - mu_yy
    cov = blur(x * y) - mu_xy
    num = (2.0 * mu_xy + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (mu_xx + mu_yy + cfg.c1) * (var_x + var_y + cfg.c2)
    return num / den


def ssim(a, b, cfg=SsimConfig()):
    """Mean SSIM; returned in the precision of ``a``."""
    a = as_tensor(a)
    return ssim_map(a, b, cfg).mean().astype(a.dtype)


def reconstruction_loss(image, recon, cfg=SsimConfig()):
    """1 - SSIM(image, recon); zero iff the reconstruction is exact."""
    return 1.0 - ssim(recon, image, cfg)


def cross_entropy(logits, labels):
    """Mean negative log-probability of the true class."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(log_softmax(logits, axis=1) * onehot).sum() / float(len(labels))
