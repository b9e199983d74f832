"""Image and task metrics: SSIM, MSE, accuracy, bit error rate.

SSIM is built out of engine ops (Gaussian-window conv plus elementwise
arithmetic), so it is differentiable and can serve directly as a training
loss. Values lie in [-1, 1]; multi-channel images are scored per channel
and averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor, no_recording


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    value_range: float = 1.0


DEFAULT_SSIM = SsimParams()


def gaussian_window(size, sigma):
    """Normalized 2-d Gaussian kernel, shape (1, 1, size, size)."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    k /= k.sum()
    return k.astype(np.float32).reshape(1, 1, size, size)


def _as_batch(x):
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    if x.ndim == 3:
        x = ops.reshape(x, (1, *x.shape))
    if x.ndim != 4:
        raise ValueError(f"ssim expects (batch, C, H, W) images, got {x.shape}")
    return x


def ssim_per_image(a, b, params=DEFAULT_SSIM):
    """SSIM of each image pair in a batch; returns a (batch,) tensor."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    n, c, h, w = a.shape
    win = min(params.window, h, w)
    kernel = Tensor(gaussian_window(win, params.sigma))
    c1 = np.float32((params.k1 * params.value_range) ** 2)
    c2 = np.float32((params.k2 * params.value_range) ** 2)

    x = ops.reshape(a, (n * c, 1, h, w))
    y = ops.reshape(b, (n * c, 1, h, w))
    mu_x = ops.conv2d(x, kernel)
    mu_y = ops.conv2d(y, kernel)
    mu_xx = ops.mul(mu_x, mu_x)
    mu_yy = ops.mul(mu_y, mu_y)
    mu_xy = ops.mul(mu_x, mu_y)
    sig_xx = ops.sub(ops.conv2d(ops.mul(x, x), kernel), mu_xx)
    sig_yy = ops.sub(ops.conv2d(ops.mul(y, y), kernel), mu_yy)
    sig_xy = ops.sub(ops.conv2d(ops.mul(x, y), kernel), mu_xy)

    num = ops.mul(ops.add(ops.mul(np.float32(2.0), mu_xy), c1), ops.add(ops.mul(np.float32(2.0), sig_xy), c2))
    den = ops.mul(ops.add(ops.add(mu_xx, mu_yy), c1), ops.add(ops.add(sig_xx, sig_yy), c2))
    smap = ops.div(num, den)
    per_channel = ops.mean(smap, axis=(1, 2, 3))
    return ops.mean(ops.reshape(per_channel, (n, c)), axis=1)


def ssim(a, b, params=DEFAULT_SSIM):
    """Mean SSIM over a batch as a scalar tensor (differentiable)."""
    return ops.mean(ssim_per_image(a, b, params))


def ssim_value(a, b, params=DEFAULT_SSIM):
    with no_recording():
        return float(ssim(a, b, params).data)


def mse(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float32))
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = ops.sub(a, b)
    return ops.mean(ops.mul(d, d))


def mse_value(a, b):
    with no_recording():
        return float(mse(a, b).data)


def accuracy(graph, images, labels, batch_size=256):
    """Fraction of argmax predictions matching labels, eval mode."""
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images vs {len(labels)} labels")
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    hits = 0
    for lo in range(0, len(images), batch_size):
        out, _ = graph.forward(images[lo : lo + batch_size], mode="eval", record=False)
        hits += int((out.data.argmax(axis=1) == labels[lo : lo + batch_size]).sum())
    return hits / len(labels)


def ber(a, b):
    """Bit error rate between two equal-length bit sequences."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError(f"bit length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty bit sequences")
    return float(np.mean(a != b))
