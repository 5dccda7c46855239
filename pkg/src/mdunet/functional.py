"""Differentiable primitives on NCHW tensors.

All convolutions are stride 1 with zero "same" padding; spatial downsampling
happens only through :func:`maxpool2d` (or :func:`avgpool2d`).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return as_tensor(a, dtype=dtype)


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_node(out, (a, b), bw, "div")


def add_n(inputs: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of equally shaped tensors (skip-connection fusion)."""
    if not inputs:
        raise ValueError("add_n needs at least one input")
    ref = inputs[0].shape
    for i, t in enumerate(inputs):
        if t.shape != ref:
            raise ValueError(f"add: input {i} has shape {t.shape}, expected {ref}")
    if len(inputs) == 1:
        return inputs[0]
    out = inputs[0].data.copy()
    for t in inputs[1:]:
        out += t.data

    def bw(g):
        return [g] * len(inputs)

    return make_node(out, tuple(inputs), bw, "add")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    # np.maximum keeps NaN, so a blown-up activation still reaches the loss
    return make_node(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,), bw, "relu")


def log(x: Tensor) -> Tensor:
    def bw(g):
        return (g / x.data,)

    return make_node(np.log(x.data), (x,), bw, "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return make_node(np.clip(x.data, lo, hi), (x,), bw, "clip", lo=lo, hi=hi)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return make_node(x.data.reshape(shape), (x,), bw, "reshape")


# --- channel plumbing ------------------------------------------------------


def concat(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along channels, preserving input order."""
    if not inputs:
        raise ValueError("concat needs at least one input")
    b, _, h, w = inputs[0].shape
    for i, t in enumerate(inputs):
        if t.ndim != 4 or t.shape[0] != b or t.shape[2:] != (h, w):
            raise ValueError(
                f"concat: input {i} has shape {t.shape}, incompatible with "
                f"batch {b} and spatial {(h, w)} of input 0"
            )
    if len(inputs) == 1:
        return inputs[0]
    sizes = [t.shape[1] for t in inputs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes))]

    return make_node(
        np.concatenate([t.data for t in inputs], axis=1), tuple(inputs), bw, "concat", sizes=sizes
    )


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"channel slice [{start}:{stop}] out of range for {x.shape[1]} channels")

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_node(x.data[:, start:stop], (x,), bw, "slice", start=start, stop=stop)


def split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if np.sum(sizes) != x.shape[1]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    out, start = [], 0
    for n in sizes:
        out.append(channel_slice(x, start, start + n))
        start += n
    return out


# --- convolution -----------------------------------------------------------


def _check_kernel_axis(k: int, axis: str) -> None:
    if k != 1 and k % 2 == 0:
        raise ValueError(f"conv2d: kernel {axis} extent {k} is even; only odd extents keep 'same' padding")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation=(1, 1)) -> Tensor:
    """Stride-1 2D convolution (cross-correlation) with zero 'same' padding.

    Pads ``(kh-1)*dh/2`` rows and ``(kw-1)*dw/2`` columns on each side, so the
    output keeps the input's spatial extent. ``dilation`` spaces the kernel taps.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and kernel, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ValueError(
            f"conv2d: input shape {x.shape} has {C} channels but kernel shape {weight.shape} expects {Ci}"
        )
    _check_kernel_axis(kh, "height")
    _check_kernel_axis(kw, "width")
    dh, dw = (dilation, dilation) if np.isscalar(dilation) else tuple(dilation)
    if dh < 1 or dw < 1:
        raise ValueError(f"conv2d: dilation must be >= 1, got {(dh, dw)}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {O} output channels")
    ph, pw = (kh - 1) * dh // 2, (kw - 1) * dw // 2
    eh, ew = (kh - 1) * dh + 1, (kw - 1) * dw + 1

    if kh == 1 and kw == 1:
        # pointwise: plain channel matmul
        out = np.tensordot(weight.data[:, :, 0, 0], x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
        cols = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols = sliding_window_view(xp, (eh, ew), axis=(2, 3))[..., ::dh, ::dw]  # B,C,H,W,kh,kw
        out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if kh == 1 and kw == 1:
            w2 = weight.data[:, :, 0, 0]
            if x.requires_grad:
                gx = np.tensordot(w2, g, axes=([0], [1])).transpose(1, 0, 2, 3)
            if weight.requires_grad:
                gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        else:
            if weight.requires_grad:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # B,H,W,C,kh,kw
                gxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i * dh : i * dh + H, j * dw : j * dw + W] += gcols[:, :, :, :, i, j].transpose(
                            0, 3, 1, 2
                        )
                gx = gxp[:, :, ph : ph + H, pw : pw + W]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, bw, "conv2d", kernel=(kh, kw), dilation=(dh, dw), padding=(ph, pw))


# --- resampling ------------------------------------------------------------


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Ties route the gradient to the first
    element of the window in row-major order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2d needs even spatial extents, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((B, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return make_node(out, (x,), bw, "maxpool2d", window=(2, 2), stride=(2, 2))


def avgpool2d(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avgpool2d needs even spatial extents, got {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_node(out.astype(x.dtype, copy=False), (x,), bw, "avgpool2d", window=(2, 2), stride=(2, 2))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling; the backward pass sums each 2x2 block."""
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), bw, "upsample2x", scale=2)


# --- normalisation and output ---------------------------------------------


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (x,), bw, "softmax")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode normalises with the biased batch statistics and updates
    ``running_mean``/``running_var`` in place; otherwise uses the running
    statistics and is an affine map.
    """
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    xhat = xhat.astype(x.dtype, copy=False)
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            n = x.data.size // x.shape[1]
            gx = (
                inv[None, :, None, None]
                / n
                * (n * gxhat - gxhat.sum(axis=axes)[None, :, None, None] - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None])
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx.astype(x.dtype, copy=False), gg, gb

    return make_node(out, (x, gamma, beta), bw, "batchnorm2d", training=training, eps=eps)
