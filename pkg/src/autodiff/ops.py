"""Differentiable ops on (n, c, h, w) tensors.

Conventions pinned here:
  * 3x3 convolutions pad by reflection (edge replication on a size-1 axis).
  * relu'(0) = 0 and abs'(0) = 0.
  * Bilinear resampling uses align_corners=False; nearest is forward-only.
  * Broadcasting is limited to scalars and per-channel vectors, shaped
    (c,) or (1, c, 1, 1). Anything else raises ``ShapeError``.

Every op keeps the dtype of its tensor inputs. That's what lets the
gradient checks run the same code in float64.
"""
from __future__ import annotations

from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.autodiff.tensor import Tensor, active_tape
from src.errors import ShapeError


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class ResampleMode(str, Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"


# --- plumbing ---

def _result(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    dtype = np.result_type(*[t.dtype for t in inputs])
    out = Tensor(np.asarray(data, dtype=dtype))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, inputs, out, backward)
    return out


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    like = a if isinstance(a, Tensor) else b
    return _lift(a, like), _lift(b, like)


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0 or (t.size == 1 and t.ndim <= 1)


def _is_channel_vector(t: Tensor, full: Tensor) -> bool:
    if full.ndim != 4:
        return False
    c = full.shape[1]
    return t.shape == (c,) or t.shape == (1, c, 1, 1)


def _aligned(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Raw arrays ready for numpy broadcasting, after checking our rules."""
    if a.shape == b.shape:
        return a.data, b.data
    for small, full in ((b, a), (a, b)):
        if _is_scalar(small):
            view = small.data.reshape(())
        elif _is_channel_vector(small, full):
            view = small.data.reshape(1, -1, 1, 1)
        else:
            continue
        return (full.data, view) if small is b else (view, full.data)
    raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}: only scalars and per-channel vectors broadcast",
                     dimension="broadcast", expected=a.shape, actual=b.shape)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return np.asarray(grad.sum()).reshape(shape)
    return grad.sum(axis=(0, 2, 3)).reshape(shape)


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an (n, c, h, w) tensor, got shape {x.shape}",
                         dimension="ndim", expected=4, actual=x.ndim)


# --- elementwise ---

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = _aligned(a, b)
    return _result("add", ad + bd, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = _aligned(a, b)
    return _result("sub", ad - bd, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = _aligned(a, b)
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = _aligned(a, b)

    def backward(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _result("div", ad / bd, (a, b), backward)


def scalar_mul(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return _result("scalar_mul", x.data * x.dtype.type(k), (x,), lambda g: (g * x.dtype.type(k),))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _result("relu", np.where(positive, x.data, 0), (x,), lambda g: (g * positive,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form: no overflow warnings for large |x|, and sigmoid(0) is exactly 0.5.
    half = x.dtype.type(0.5)
    s = half * (np.tanh(half * x.data) + 1)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy's name
    sign = np.sign(x.data)
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def log(x: Tensor) -> Tensor:
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    if e == 0.0:
        return _result("pow", np.ones_like(x.data), (x,), lambda g: (np.zeros_like(x.data),))
    e_t = x.dtype.type(e)
    return _result("pow", x.data ** e_t, (x,), lambda g: (g * e_t * x.data ** (e_t - 1),))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)
    data = np.clip(x.data, x.dtype.type(low), x.dtype.type(high))
    return _result("clip", data, (x,), lambda g: (g * inside,))


def mask_pixels(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant (n, 1, h, w) mask shared across channels."""
    _require_4d(x, "mask_pixels")
    n, _, h, w = x.shape
    if mask.shape != (n, 1, h, w):
        raise ShapeError(f"pixel mask must be {(n, 1, h, w)}, got {mask.shape}",
                         dimension="mask", expected=(n, 1, h, w), actual=mask.shape)
    m = mask.astype(x.dtype, copy=False)
    return _result("mask_pixels", x.data * m, (x,), lambda g: (g * m,))


# --- reductions ---

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", data, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty axis", dimension="size", expected=">0", actual=0)
    return scalar_mul(sum(x, axes, keepdims), 1.0 / count)


# --- convolution / dense ---

def _pad_axis(a: np.ndarray, axis: int) -> np.ndarray:
    widths = [(0, 0)] * a.ndim
    widths[axis] = (1, 1)
    mode = "reflect" if a.shape[axis] > 1 else "edge"
    return np.pad(a, widths, mode=mode)


def _reflect_pad(a: np.ndarray) -> np.ndarray:
    return _pad_axis(_pad_axis(a, 2), 3)


def _fold_axis(padded: np.ndarray, axis: int, size: int) -> np.ndarray:
    """Adjoint of ``_pad_axis``: pour the pad rows back onto their sources."""
    moved = np.moveaxis(padded, axis, 0)
    folded = moved[1:size + 1].copy()
    first, last = (1, size - 2) if size > 1 else (0, 0)
    folded[first] += moved[0]
    folded[last] += moved[size + 1]
    return np.moveaxis(folded, 0, axis)


def _im2col(padded: np.ndarray, h: int, w: int) -> np.ndarray:
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    n, c = padded.shape[:2]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size 3x3 convolution (cross-correlation, like every DL framework)."""
    _require_4d(x, "conv2d_3x3")
    n, cin, h, w = x.shape
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv weight must be (cout, cin, 3, 3), got {weight.shape}",
                         dimension="kernel", expected=(3, 3), actual=weight.shape[2:])
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"conv weight expects {weight.shape[1]} input channels, input has {cin}",
                         dimension="cin", expected=weight.shape[1], actual=cin)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv bias must be ({cout},), got {bias.shape}",
                         dimension="cout", expected=cout, actual=bias.shape)
    if h < 1 or w < 1:
        raise ShapeError("conv2d_3x3 needs h, w >= 1", dimension="spatial", expected=">=1", actual=(h, w))

    padded = _reflect_pad(x.data)
    wmat = weight.data.reshape(cout, cin * 9)
    out = _im2col(padded, h, w) @ wmat.T
    if bias is not None:
        out = out + bias.data
    data = out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        # Recomputed rather than saved: a rollout would otherwise hold one
        # (n*h*w, 9c) matrix per step.
        cols = _im2col(padded, h, w)
        grad_w = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ wmat).reshape(n, h, w, cin, 3, 3)
        grad_padded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                grad_padded[:, :, i:i + h, j:j + w] += dcols[..., i, j].transpose(0, 3, 1, 2)
        grad_x = _fold_axis(_fold_axis(grad_padded, 3, w), 2, h)
        grad_b = g2.sum(axis=0) if bias is not None else None
        return grad_x, grad_w, grad_b

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d_3x3", data, inputs, backward)


def dense_1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel affine map, i.e. a 1x1 convolution."""
    _require_4d(x, "dense_1x1")
    n, cin, h, w = x.shape
    if weight.ndim != 2 or weight.shape[1] != cin:
        raise ShapeError(f"dense weight must be (cout, {cin}), got {weight.shape}",
                         dimension="cin", expected=cin, actual=weight.shape)
    cout = weight.shape[0]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"dense bias must be ({cout},), got {bias.shape}",
                         dimension="cout", expected=cout, actual=bias.shape)

    flat = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data
    data = out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        grad_x = (g2 @ weight.data).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        grad_w = g2.T @ flat
        grad_b = g2.sum(axis=0) if bias is not None else None
        return grad_x, grad_w, grad_b

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("dense_1x1", data, inputs, backward)


# --- normalization ---

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               mode: Mode, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm.

    Train mode normalizes by the batch statistics over (n, h, w) and updates
    the running buffers *in place*. Eval mode uses the running buffers and
    leaves them alone.
    """
    _require_4d(x, "batch_norm")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm {name} must be ({c},), got {t.shape}",
                             dimension="channels", expected=c, actual=t.shape)
    if eps <= 0:
        raise ValueError("batch_norm eps must be > 0")

    axes = (0, 2, 3)
    dt = x.dtype.type
    g_b = gamma.data.reshape(1, c, 1, 1)
    b_b = beta.data.reshape(1, c, 1, 1)

    if Mode(mode) is Mode.TRAIN:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count == 0:
            raise ShapeError("batch_norm in train mode needs a non-empty batch",
                             dimension="batch", expected=">0", actual=0)
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = (1 / np.sqrt(var + dt(eps))).astype(x.dtype, copy=False)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)

        unbiased = var * (count / (count - 1)) if count > 1 else var
        m = dt(momentum)
        running_mean.data[...] = (1 - m) * running_mean.data + m * mu
        running_var.data[...] = (1 - m) * running_var.data + m * unbiased

        def backward(g):
            dxhat = g * g_b
            inv_b = inv.reshape(1, c, 1, 1)
            grad_x = (inv_b / count) * (count * dxhat
                                        - dxhat.sum(axis=axes, keepdims=True)
                                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return grad_x, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = (1 / np.sqrt(running_var.data + dt(eps))).astype(x.dtype, copy=False)
        xhat = (x.data - running_mean.data.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)

        def backward(g):
            return g * g_b * inv.reshape(1, c, 1, 1), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result("batch_norm", g_b * xhat + b_b, (x, gamma, beta), backward)


# --- resampling ---

@lru_cache(maxsize=64)
def _interp_matrix(in_size: int, out_size: int, mode: str, dtype_name: str) -> np.ndarray:
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for dst in range(out_size):
        if mode == ResampleMode.NEAREST.value:
            matrix[dst, min(int(np.floor(dst * scale)), in_size - 1)] = 1.0
            continue
        src = max((dst + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        matrix[dst, i0] += 1.0 - frac
        matrix[dst, i1] += frac
    matrix = matrix.astype(dtype_name)
    matrix.setflags(write=False)
    return matrix


def resample(x: Tensor, out_h: int, out_w: int, mode: ResampleMode = ResampleMode.BILINEAR) -> Tensor:
    """Resize h, w. Bilinear is differentiable; nearest is a constant passthrough."""
    _require_4d(x, "resample")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resample target must be >= 1x1, got {out_h}x{out_w}",
                         dimension="spatial", expected=">=1", actual=(out_h, out_w))
    mode = ResampleMode(mode)
    _, _, h, w = x.shape
    rows = _interp_matrix(h, out_h, mode.value, x.dtype.name)
    cols = _interp_matrix(w, out_w, mode.value, x.dtype.name)
    data = rows @ x.data @ cols.T
    if mode is ResampleMode.NEAREST:
        return Tensor(data)
    return _result("resample", data, (x,), lambda g: (rows.T @ g @ cols,))


# --- structural ---

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor", dimension="count", expected=">0", actual=0)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat shapes disagree off axis {axis}: {ref} vs {t.shape}",
                             dimension="concat", expected=ref, actual=t.shape)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result("concat", data, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d(x, "slice_channels")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}) out of range for {x.shape[1]} channels",
                         dimension="channels", expected=x.shape[1], actual=(start, stop))

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return _result("slice_channels", x.data[:, start:stop].copy(), (x,), backward)


def replace_channels(x: Tensor, source: Tensor, start: int) -> Tensor:
    """Copy of ``x`` whose channels [start, start + k) are ``source``'s."""
    _require_4d(x, "replace_channels")
    _require_4d(source, "replace_channels")
    k = source.shape[1]
    stop = start + k
    if source.shape[0] != x.shape[0] or source.shape[2:] != x.shape[2:] or stop > x.shape[1]:
        raise ShapeError(f"cannot place {source.shape} into {x.shape} at channel {start}",
                         dimension="channels", expected=x.shape, actual=source.shape)
    data = x.data.copy()
    data[:, start:stop] = source.data

    def backward(g):
        grad_x = g.copy()
        grad_x[:, start:stop] = 0
        return grad_x, g[:, start:stop].copy()

    return _result("replace_channels", data, (x, source), backward)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    _require_4d(x, "crop")
    _, _, h, w = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w or height < 1 or width < 1:
        raise ShapeError(f"crop ({top}, {left}, {height}, {width}) falls outside {h}x{w}",
                         dimension="spatial", expected=(h, w), actual=(top + height, left + width))

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[:, :, top:top + height, left:left + width] = g
        return (grad,)

    return _result("crop", x.data[:, :, top:top + height, left:left + width].copy(), (x,), backward)
