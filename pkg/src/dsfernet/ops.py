"""Differentiable operations on :class:`Tensor`.

Spatial ops take ``[c, h, w]`` or batched ``[n, c, h, w]`` inputs and return
the same rank they were given.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import DTYPE, Tensor, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# When a list, the non-smooth ops (relu, clamp, abs_diff, maxpool2) append their
# branch decisions to it. Gradient checking uses this to notice when a finite
# difference step crosses a kink.
_kink_log: Optional[list] = None


class trace_kinks:
    def __enter__(self) -> list:
        global _kink_log
        self._saved = _kink_log
        _kink_log = []
        return _kink_log

    def __exit__(self, *exc) -> None:
        global _kink_log
        _kink_log = self._saved


def _record(decision: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(decision)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _batched(x: Tensor, name: str) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    raise ShapeError(f"{name} expects [c,h,w] or [n,c,h,w], got shape {x.shape}")


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (used for mask application)."""
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


elementwise_mul = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor.from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def abs_diff(a: Tensor, b: Tensor) -> Tensor:
    """``|a - b|``; the subgradient at ties is zero."""
    if a.shape != b.shape:
        raise ShapeError(f"abs_diff shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    sign = np.sign(diff)
    _record(sign)

    def _bw(g):
        ga = g * sign
        return ga, -ga

    return Tensor.from_op(np.abs(diff), (a, b), _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record(mask)
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    _record(inside)
    return Tensor.from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), _bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a ``[n, m]`` matrix (or a batch of them)."""
    if x.ndim < 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor.from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return Tensor.from_op(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),)
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (dimension removed)."""
    out = np.take(x.data, index, axis=axis)

    def _bw(g):
        full = np.zeros(x.shape)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return Tensor.from_op(out, (x,), _bw)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis, kept as a single channel."""
    axis = x.ndim - 3
    c = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=True)
    return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g / c, x.shape).copy(),))


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def _bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tuple(tensors), _bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.ndim not in (3, 4) or a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    return concat([a, b], axis=a.ndim - 3)


def reshape_matrix(x: Tensor) -> Tensor:
    """``[c,h,w] -> [h*w, c]``: spatial positions become rows, channels columns."""
    if x.ndim == 3:
        c, h, w = x.shape
        return reshape(transpose(x, (1, 2, 0)), (h * w, c))
    if x.ndim == 4:
        n, c, h, w = x.shape
        return reshape(transpose(x, (0, 2, 3, 1)), (n, h * w, c))
    raise ShapeError(f"reshape_matrix expects [c,h,w] or [n,c,h,w], got {x.shape}")


def matrix_to_map(x: Tensor, h: int, w: int) -> Tensor:
    """Inverse layout of :func:`reshape_matrix`: ``[h*w, d] -> [d, h, w]``."""
    if x.shape[-2] != h * w:
        raise ShapeError(f"cannot fold {x.shape} into {h}x{w}")
    d = x.shape[-1]
    if x.ndim == 2:
        return transpose(reshape(x, (h, w, d)), (2, 0, 1))
    n = x.shape[0]
    return transpose(reshape(x, (n, h, w, d)), (0, 3, 1, 2))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(out, (a, b), _bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    xb, squeeze = _batched(x, "conv2d")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [c_out,c_in,k,k], got {kernel.shape}")
    n, c, h, w = xb.shape
    c_out, c_in, kh, kw = kernel.shape
    if c_in != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    if kh != kw:
        raise ShapeError(f"conv2d: non-square kernel {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    # channel-major layout throughout: cols is [c*k*k, n*ho*wo]
    xt = xb.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    wmat = kernel.data.reshape(c_out, c * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))

    def _bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, n * ho * wo)
        gk = (gmat @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if xb.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        return gx, gk, gb

    parents = (xb, kernel) + ((bias,) if bias is not None else ())
    result = Tensor.from_op(out, parents, lambda g: _bw(g)[: len(parents)])
    return _unbatch(result, squeeze)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Gradient goes to the first maximal element."""
    xb, squeeze = _batched(x, "maxpool2")
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = xb.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    _record(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _unbatch(Tensor.from_op(out, (xb,), _bw), squeeze)


def _upsample_matrix(size: int, method: str) -> np.ndarray:
    u = np.zeros((2 * size, size))
    if method == "nearest":
        for j in range(size):
            u[2 * j, j] = u[2 * j + 1, j] = 1.0
        return u
    if method != "bilinear":
        raise ConfigError(f"unknown upsample method {method!r}")
    # half-pixel centres: output i samples source coordinate (i + 0.5) / 2 - 0.5
    for i in range(2 * size):
        src = (i + 0.5) / 2 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        u[i, min(max(lo, 0), size - 1)] += 1.0 - frac
        u[i, min(max(lo + 1, 0), size - 1)] += frac
    return u


def upsample2x(x: Tensor, method: str = "bilinear") -> Tensor:
    """Double spatial resolution (bilinear without corner alignment, or nearest)."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"upsample2x expects [c,h,w] or [n,c,h,w], got {x.shape}")
    h, w = x.shape[-2:]
    uh = _upsample_matrix(h, method)
    uw = _upsample_matrix(w, method)
    out = uh @ x.data @ uw.T
    return Tensor.from_op(out, (x,), lambda g: (uh.T @ g @ uw,))


# ---------------------------------------------------------------- batch norm

class RunningStats:
    """Per-channel running mean/variance used by batchnorm in eval mode."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta_shift: Tensor,
    stats: RunningStats,
    train: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    xb, squeeze = _batched(x, "batchnorm")
    n, c, h, w = xb.shape
    if n * h * w == 0:
        raise ShapeError("batchnorm on an empty batch")
    if gamma.shape != (c,) or beta_shift.shape != (c,):
        raise ShapeError(f"batchnorm affine params must be ({c},), got {gamma.shape}, {beta_shift.shape}")
    shape = (1, c, 1, 1)
    if train:
        m = xb.data.mean(axis=(0, 2, 3))
        v = xb.data.var(axis=(0, 2, 3))
        count = n * h * w
        unbiased = v * count / (count - 1) if count > 1 else v
        stats.mean *= 1.0 - momentum
        stats.mean += momentum * m
        stats.var *= 1.0 - momentum
        stats.var += momentum * unbiased
    else:
        m, v = stats.mean.copy(), stats.var.copy()
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xb.data - m.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta_shift.data.reshape(shape)

    def _bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if train:
            count = n * h * w
            gx = (inv.reshape(shape) / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, ggamma, gbeta

    return _unbatch(Tensor.from_op(out, (xb, gamma, beta_shift), _bw), squeeze)
