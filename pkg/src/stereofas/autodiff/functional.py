"""Differentiable operations on :class:`Tensor`.

Each op computes its forward result with numpy and registers a closure that
returns one gradient per parent (``None`` for non-differentiable inputs).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data
    return make_result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return make_result(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,))


def absolute(x: Tensor) -> Tensor:
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(inner)
    out = 0.5 * z * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * z * z)
        return (g * (0.5 * (1 + t) + 0.5 * z * (1 - t * t) * dinner),)

    return make_result(out, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    z = x.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    return make_result(out, (x,), lambda g: (g * _sigmoid(z),))


def log_sigmoid(x: Tensor) -> Tensor:
    return neg(softplus(neg(x)))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return make_result(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0), a.shape),
            _unbroadcast(np.where(cond, 0, g), b.shape),
        ),
    )


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (e.g. -inf)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return make_result(out, (x,), lambda g: (np.where(mask, 0, g),))


# ------------------------------------------------------------------ reductions
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        return (gx,)

    return make_result(out, (x,), backward)


def amin(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return neg(amax(neg(x), axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------------- shapes
def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return make_result(
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,),
        lambda g: (np.transpose(g, inv),),
    )


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return make_result(np.array(out, copy=True), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % out.ndim
    return make_result(
        out,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


# ---------------------------------------------------------------------- matmul
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    in_features = weight.shape[1]
    if x.shape[-1] != in_features:
        raise ValueError(f"linear expects last dim {in_features}, got shape {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, in_features)
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward)


# ----------------------------------------------------------------- convolution
def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ValueError(f"convolution output size is not positive: n={n}, k={k}, stride={stride}, pad={pad}")
    return span // stride + 1


def _windows(x: np.ndarray, k: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_input_grad(g: np.ndarray, wmat_t: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Gradient of a strided correlation wrt its input, as a full correlation
    of the (zero-dilated) output gradient with the flipped kernel.

    ``wmat_t`` is the kernel rearranged to (C_in, C_out, k, k)."""
    b, c, h, w = x_shape
    _, co, ho, wo = g.shape
    if stride > 1:
        gd = np.zeros((b, co, stride * (ho - 1) + 1, stride * (wo - 1) + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    hp, wp = h + 2 * pad, w + 2 * pad
    # full correlation length is len(gd) + k - 1; pad the tail up to the padded input size
    extra_h = hp - (gd.shape[2] + k - 1)
    extra_w = wp - (gd.shape[3] + k - 1)
    gd = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1 + extra_h), (k - 1, k - 1 + extra_w)))
    win = sliding_window_view(gd, (k, k), axis=(2, 3))  # (B, C_out, Hp, Wp, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, co * k * k)
    flipped = wmat_t[:, :, ::-1, ::-1].reshape(c, -1)
    gxp = (cols @ flipped.T).reshape(b, hp, wp, c).transpose(0, 3, 1, 2)
    return gxp[:, :, pad : pad + h, pad : pad + w]


def _check_conv(x: Tensor, w: Tensor, stride: int):
    k = w.shape[-1]
    if w.shape[-2] != k or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) input, got {x.shape}")
    return k


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation, weight layout (C_out, C_in, k, k)."""
    k = _check_conv(x, w, stride)
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    ho = _conv_out(x.shape[2], k, stride, pad)
    wo = _conv_out(x.shape[3], k, stride, pad)
    win = _windows(x.data, k, stride, pad)  # (B, C, Ho, Wo, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, w.shape[1] * k * k)
    wmat = w.data.reshape(w.shape[0], -1)
    out = cols @ wmat.T  # (B*Ho*Wo, C_out)
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gx = _conv_input_grad(g, w.data.transpose(1, 0, 2, 3), x.shape, k, stride, pad)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(np.ascontiguousarray(out), parents, backward)


def dwconv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Depthwise cross-correlation, weight layout (C, 1, k, k)."""
    k = _check_conv(x, w, stride)
    c = x.shape[1]
    if w.shape[0] != c or w.shape[1] != 1:
        raise ValueError(f"dwconv2d expects weight ({c}, 1, k, k), got {w.shape}")
    ho = _conv_out(x.shape[2], k, stride, pad)
    wo = _conv_out(x.shape[3], k, stride, pad)
    win = _windows(x.data, k, stride, pad)
    kern = w.data[:, 0]
    out = np.zeros((x.shape[0], c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += win[..., i, j] * kern[None, :, i, j, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.einsum("bchwij,bchw->cij", win, g)[:, None]
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            bx, _, h, wd = x.shape
            gxp = np.zeros((bx, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        g * kern[None, :, i, j, None, None]
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + wd]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, backward)


# --------------------------------------------------------------------- softmax
def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), backward)


# --------------------------------------------------------- separable resampling
def apply_along_axis(x: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Contract ``axis`` of ``x`` with a constant (n_out, n_in) matrix."""
    axis = axis % x.ndim
    m = np.asarray(matrix, dtype=x.dtype)
    if m.shape[1] != x.shape[axis]:
        raise ValueError(f"matrix {m.shape} does not fit axis {axis} of {x.shape}")
    moved = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(moved @ m.T, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1) @ m
        return (np.ascontiguousarray(np.moveaxis(gm, -1, axis)),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights, half-pixel (align_corners=False) convention."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1 - t
        m[o, i1] += t
    return m


def resize_axis(x: Tensor, axis: int, n_out: int) -> Tensor:
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    return apply_along_axis(x, interpolation_matrix(n_in, n_out), axis)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    return resize_axis(resize_axis(x, -2, out_h), -1, out_w)


def box_matrix(n: int, k: int) -> np.ndarray:
    """Rows average ``k`` consecutive inputs; only fully valid windows."""
    m = np.zeros((n - k + 1, n))
    for o in range(n - k + 1):
        m[o, o : o + k] = 1.0 / k
    return m


def box_filter(x: Tensor, k: int) -> Tensor:
    """Uniform k x k mean over the last two axes, valid windows only."""
    h, w = x.shape[-2:]
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} smaller than window {k}")
    return apply_along_axis(apply_along_axis(x, box_matrix(h, k), -2), box_matrix(w, k), -1)


# ------------------------------------------------------------------------ warp
def warp_horizontal(img: Tensor, disp: Tensor) -> Tensor:
    """Sample ``img`` at (x - disp, y) with linear interpolation along rows.

    Sample coordinates are clamped to the image border. Shapes (..., H, W).
    """
    if img.shape != disp.shape:
        raise ValueError(f"image {img.shape} and disparity {disp.shape} differ in shape")
    w = img.shape[-1]
    xs = np.arange(w, dtype=img.dtype) - disp.data
    inside = (xs >= 0) & (xs <= w - 1)
    xs = np.clip(xs, 0, w - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    t = (xs - x0).astype(img.dtype)
    v0 = np.take_along_axis(img.data, x0, axis=-1)
    v1 = np.take_along_axis(img.data, x1, axis=-1)
    out = (1 - t) * v0 + t * v1

    def backward(g):
        gimg = gd = None
        if img.requires_grad:
            gimg = np.zeros_like(img.data)
            flat = gimg.reshape(-1, w)
            rows = np.repeat(np.arange(flat.shape[0]), w).reshape(flat.shape)
            np.add.at(flat, (rows, x0.reshape(flat.shape)), (g * (1 - t)).reshape(flat.shape))
            np.add.at(flat, (rows, x1.reshape(flat.shape)), (g * t).reshape(flat.shape))
        if disp.requires_grad:
            gd = -g * (v1 - v0) * inside
        return gimg, gd

    return make_result(out, (img, disp), backward)


def pad_last2(x: Tensor, pad: int) -> Tensor:
    return make_result(
        np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]),
        (x,),
        lambda g: (g[..., pad : g.shape[-2] - pad, pad : g.shape[-1] - pad],),
    )
