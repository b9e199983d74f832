"""Differentiable operations over autograd.Tensor.

Every op computes its forward value in float32, and, when a tape is active
and any input requires grad, records a backward closure returning one
gradient array (or None) per input.
"""
from __future__ import annotations

import numpy as np

from .autograd import Tensor, TapeNode, active_tape, debug_checks_enabled


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _apply(op, inputs, out_data, backward_fn, saved=()):
    if debug_checks_enabled() and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values out of op '{op}'")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(
        isinstance(i, Tensor) and i.requires_grad for i in inputs
    ):
        out.requires_grad = True
        tape.nodes.append(TapeNode(op, inputs, out, backward_fn, saved))
    return out


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _apply("add", (a, b), a.data + b.data, bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _apply("sub", (a, b), a.data - b.data, bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _apply("mul", (a, b), a.data * b.data, bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _apply("div", (a, b), a.data / b.data, bwd)


def neg(a):
    a = as_tensor(a)
    return _apply("neg", (a,), -a.data, lambda g: (-g,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _apply("relu", (a,), a.data * mask, bwd)


# ------------------------------------------------------------------- linear


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _apply("matmul", (a, b), a.data @ b.data, bwd)


def transpose2d(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got {a.shape}")
    return _apply(
        "transpose2d", (a,), np.ascontiguousarray(a.data.T), lambda g: (g.T,)
    )


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(np.float32),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.data.shape).astype(np.float32),)

    return _apply("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= a.data.shape[i]
    inv = np.float32(1.0 / count)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g * inv, a.data.shape).astype(np.float32),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx * inv, a.data.shape).astype(np.float32),)

    return _apply("mean", (a,), a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _apply("reshape", (a,), out, bwd)


# ------------------------------------------------------------- conv kernels
# Raw numpy helpers shared by conv2d's forward/backward. conv_transpose2d's
# own forward deliberately does NOT use conv2d_input_grad; see below.


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv_out_hw(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    return oh, ow


def im2col(x, kh, kw, stride, pad):
    """(B,C,H,W) -> (B, C*kh*kw, OH*OW) patch matrix."""
    b, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, kh, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w} (pad={pad})")
    xp = _pad_hw(x, pad)
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def col2im(cols, in_hw, c, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add patches back to (B,C,H,W)."""
    h, w = in_hw
    b = cols.shape[0]
    oh, ow = conv_out_hw(h, w, kh, kw, stride, pad)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad == 0:
        return xp
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d_forward_raw(x, w, stride, pad):
    b = x.shape[0]
    k, c, kh, kw = w.shape
    oh, ow = conv_out_hw(x.shape[2], x.shape[3], kh, kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)
    out = w.reshape(k, -1) @ cols
    return out.reshape(b, k, oh, ow)


def conv2d_input_grad_raw(g, w, stride, pad, in_hw):
    b = g.shape[0]
    k, c, kh, kw = w.shape
    cols_g = w.reshape(k, -1).T @ g.reshape(b, k, -1)
    return col2im(cols_g, in_hw, c, kh, kw, stride, pad)


def conv2d_weight_grad_raw(x, g, stride, pad, w_shape):
    k, c, kh, kw = w_shape
    b = x.shape[0]
    cols = im2col(x, kh, kw, stride, pad)
    gw = g.reshape(b, k, -1) @ cols.transpose(0, 2, 1)
    return gw.sum(axis=0).reshape(w_shape)


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-d cross-correlation, kernel (K, C, kh, kw), optional bias (K,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and KCkk kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    bt = as_tensor(b) if b is not None else None
    out = conv2d_forward_raw(x.data, w.data, stride, pad)
    if bt is not None:
        out = out + bt.data.reshape(1, -1, 1, 1)
    in_hw = x.shape[2:]

    def bwd(g):
        gx = conv2d_input_grad_raw(g, w.data, stride, pad, in_hw)
        gw = conv2d_weight_grad_raw(x.data, g, stride, pad, w.data.shape)
        if bt is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if bt is None else (x, w, bt)
    return _apply("conv2d", inputs, out, bwd)


def conv_transpose2d(y, w, stride=1, pad=0, out_hw=None):
    """Adjoint of conv2d in the forward direction: maps a (B,K,OH,OW) map
    back through kernel (K,C,kh,kw) to (B,C,H,W).

    Forward value is computed by zero-stuffing `y` by the stride and running
    a unit-stride conv with the spatially flipped, channel-swapped kernel.
    That is an independent formulation from conv2d's input-gradient path
    (col2im scatter), which is what ties the two together in tests.
    """
    y, w = as_tensor(y), as_tensor(w)
    if y.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv_transpose2d expects NCHW input, got {y.shape}, {w.shape}")
    if y.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d channel mismatch: input {y.shape[1]}, kernel {w.shape[0]}")
    k, c, kh, kw = w.shape
    b, _, oh, ow = y.shape
    base_h = (oh - 1) * stride + kh - 2 * pad
    base_w = (ow - 1) * stride + kw - 2 * pad
    if out_hw is None:
        out_hw = (base_h, base_w)
    opad_h = out_hw[0] - base_h
    opad_w = out_hw[1] - base_w
    if not (0 <= opad_h < stride or (opad_h == 0 and stride == 1)) or not (
        0 <= opad_w < stride or (opad_w == 0 and stride == 1)
    ):
        raise ValueError(
            f"cannot reach output {out_hw} from {oh}x{ow} with k={kh}, stride={stride}, pad={pad}"
        )

    stuffed = np.zeros(
        (b, k, (oh - 1) * stride + 1 + opad_h, (ow - 1) * stride + 1 + opad_w),
        dtype=np.float32,
    )
    stuffed[:, :, :: stride, :: stride][:, :, :oh, :ow] = y.data
    flipped = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    out = conv2d_forward_raw(stuffed, flipped, 1, kh - 1 - pad)

    def bwd(g):
        # linear in y: adjoint is the forward conv itself
        gy = conv2d_forward_raw(g, w.data, stride, pad)
        gw = conv2d_weight_grad_raw(g, y.data, stride, pad, w.data.shape)
        return gy, gw

    return _apply("conv_transpose2d", (y, w), out, bwd)


# ------------------------------------------------------------------ pooling


def maxpool2d(x, kernel=2, stride=None):
    x = as_tensor(x)
    if stride is None:
        stride = kernel
    b, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"maxpool window {kernel} does not fit input {h}x{w}")
    wins = np.empty((b, c, oh, ow, kernel * kernel), dtype=np.float32)
    for i in range(kernel):
        for j in range(kernel):
            wins[:, :, :, :, i * kernel + j] = x.data[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ]
    arg = wins.argmax(axis=-1)
    out = np.take_along_axis(wins, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros((b, c, h, w), dtype=np.float32)
        bi, ci, oi, oj = np.indices((b, c, oh, ow), sparse=False)
        ri = oi * stride + arg // kernel
        rj = oj * stride + arg % kernel
        np.add.at(gx, (bi, ci, ri, rj), g)
        return (gx,)

    return _apply("maxpool2d", (x,), out, bwd, saved=(arg,))


def upsample_nearest(x, factor):
    """Replicate each spatial value factor x factor."""
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    b, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bwd(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _apply("upsample_nearest", (x,), out, bwd)


# --------------------------------------------------------------- stochastic


def dropout(x, rate, rng, train):
    """Inverted dropout: scales kept units by 1/(1-rate) during training."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return _apply("dropout", (x,), x.data.copy(), lambda g: (g,))
    keep = np.float32(1.0 - rate)
    mask = (rng.random(x.shape, dtype=np.float32) >= rate).astype(np.float32) / keep

    def bwd(g):
        return (g * mask,)

    return _apply("dropout", (x,), x.data * mask, bwd)


# ---------------------------------------------------------------- batchnorm


def batchnorm2d(x, gamma, beta, state, eps=1e-5, momentum=0.1, train=True):
    """Per-channel batch normalization over (B, H, W).

    `state` is a dict carrying running_mean / running_var buffers; they are
    updated in train mode and used for normalization in eval mode.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    b, c, h, w = x.shape
    gm = gamma.data.reshape(1, c, 1, 1)
    bt = beta.data.reshape(1, c, 1, 1)
    if train:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        state["running_mean"] = (1 - momentum) * state["running_mean"] + momentum * mu.reshape(c)
        state["running_var"] = (1 - momentum) * state["running_var"] + momentum * var.reshape(c)
    else:
        mu = state["running_mean"].reshape(1, c, 1, 1)
        var = state["running_var"].reshape(1, c, 1, 1)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * invstd
    out = gm * xhat + bt
    n = b * h * w

    def bwd(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        if train:
            gx = (gm * invstd) * (
                g
                - g.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (g * xhat).sum(axis=(0, 2, 3), keepdims=True) / n
            )
        else:
            gx = g * gm * invstd
        return gx.astype(np.float32), gg.astype(np.float32), gb.astype(np.float32)

    return _apply("batchnorm2d", (x, gamma, beta), out.astype(np.float32), bwd)


# --------------------------------------------------------------------- loss


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; labels is an int array of class ids."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean(dtype=np.float32)

    def bwd(g):
        p = ez / sez
        p[np.arange(n), labels] -= 1.0
        return (g * p / np.float32(n),)

    return _apply("cross_entropy", (logits,), np.float32(loss), bwd)


# ------------------------------------------------------------------ dunders

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
