"""Differentiable operations over :class:`Tensor`.

Elementwise ``add`` and ``mul`` accept numpy-style broadcasting because the
phase gate multiplies a per-channel ``C x 1 x 1`` vector into a ``C x H x W``
plane; everything else checks shapes strictly.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    a = as_tensor(a)
    b = _operand(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return make(out, (x,), lambda g: (g * out * (1.0 - out),))


def cos(x: Tensor) -> Tensor:
    return make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def sin(x: Tensor) -> Tensor:
    return make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


# -- reductions and shape ---------------------------------------------------
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = x.data[index]

    fancy = _is_fancy(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if fancy:
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    return make(np.array(out), (x,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"cannot concat shapes {ref} and {p.shape} along axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))
        )

    return make(out, tuple(parts), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate ``C_k x H x W`` (optionally batched) tensors along channels."""
    for p in parts[1:]:
        if p.shape[-2:] != parts[0].shape[-2:]:
            raise ShapeError(
                f"spatial dims differ: {parts[0].shape} vs {p.shape}"
            )
    return concat(parts, axis=-3)


def split_channels(x: Tensor, k: int) -> list[Tensor]:
    c = x.shape[-3]
    if c % k:
        raise ShapeError(f"{c} channels do not split into {k} equal parts")
    step = c // k
    return [x[..., i * step:(i + 1) * step, :, :] for i in range(k)]


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data
    return make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x: N x D_in``, ``w: D_out x D_in``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gb = g.sum(axis=0) if b is not None else None
        return g @ w.data, g.T @ x.data, gb

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward)


def _channel_major(a: np.ndarray) -> np.ndarray:
    """``[..., C, H, W]`` -> contiguous ``[C, prod(...) * H * W]``."""
    c = a.shape[-3]
    lead = int(np.prod(a.shape[:-3], dtype=np.int64))
    return np.ascontiguousarray(a.reshape(lead, c, -1).transpose(1, 0, 2)).reshape(c, -1)


def _from_channel_major(a2: np.ndarray, lead: tuple, h: int, w: int) -> np.ndarray:
    c = a2.shape[0]
    n = int(np.prod(lead, dtype=np.int64))
    return np.ascontiguousarray(a2.reshape(c, n, h, w).transpose(1, 0, 2, 3)).reshape(*lead, c, h, w)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution over ``[..., C_in, H, W]``.

    out[o, h, w] = b[o] + sum_i w[o, i] * x[i, h, w]
    """
    if x.ndim < 3 or w.ndim != 2 or w.shape[1] != x.shape[-3] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"conv1x1: input {x.shape} does not conform to kernel {w.shape} / bias {b.shape}"
        )
    lead = x.shape[:-3]
    cin, h, wd = x.shape[-3:]
    # channel-major 2-D layout; plain matmul keeps the reduction order fixed
    x2 = _channel_major(x.data)
    out = _from_channel_major(w.data @ x2, lead, h, wd) + b.data[:, None, None]

    def backward(g):
        g2 = _channel_major(g)
        gx = _from_channel_major(w.data.T @ g2, lead, h, wd)
        gw = g2 @ x2.T
        gb = g2.sum(axis=1)
        return gx, gw, gb

    return make(out, (x, w, b), backward)


def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Dense 2-D convolution (cross-correlation), ``x: N x C_in x H x W``."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: input {x.shape} does not conform to kernel {w.shape}")
    n, _, h, wd = x.shape
    c_out, c_in, kh, kw = w.shape
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (wd + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = _pad_hw(x.data, pad)
    # cols: N x H_out x W_out x (C_in*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c_in * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T + b.data).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(w.shape)
        gb = gmat.sum(axis=0)
        gcols = (gmat @ wmat).reshape(n, h_out, w_out, c_in, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    return make(np.ascontiguousarray(out), (x, w, b), backward)


def gap(x: Tensor) -> Tensor:
    """Global average pool over the trailing ``H x W`` plane, keeping dims."""
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"gap needs a trailing H x W plane, got {x.shape}")
    return mean(x, axis=(-2, -1), keepdims=True)


# -- normalization ----------------------------------------------------------
class BatchNormState:
    """Running statistics of one batch-norm layer (not learnable)."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def _channel_view(shape: tuple[int, ...]) -> tuple[int, ...]:
    return (1, shape[1]) + (1,) * (len(shape) - 2)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState | None,
    training: bool,
    eps: float = NORM_EPS,
) -> Tensor:
    """Per-channel batch norm over ``N x C x ...``.

    Training mode normalizes with biased batch statistics and folds the
    unbiased variance into the running estimate; ``state=None`` skips that.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} vs affine {gamma.shape}")
    view = _channel_view(x.shape)
    g_ = gamma.data.reshape(view)
    if not training:
        if state is None:
            raise ValueError("batch_norm in eval mode needs running statistics")
        scale = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean.reshape(view)) * scale.reshape(view)
        out = g_ * xhat + beta.data.reshape(view)
        axes = (0,) + tuple(range(2, x.ndim))

        def backward_eval(g):
            return (
                g * g_ * scale.reshape(view),
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward_eval)

    if x.shape[0] < 2:
        raise ShapeError("batch_norm in train mode needs at least 2 samples")
    axes = (0,) + tuple(range(2, x.ndim))
    count = x.size // x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = g_ * xhat + beta.data.reshape(view)

    if state is not None:
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(-1)
        unbiased = var.reshape(-1) * count / max(count - 1, 1)
        state.running_var = (1 - m) * state.running_var + m * unbiased

    def backward(g):
        gxhat = g * g_
        gx = inv * (
            gxhat
            - gxhat.mean(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make(out, (x, gamma, beta), backward)


def instance_norm(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = NORM_EPS,
) -> Tensor:
    """Standardize each ``(n, c)`` plane over its ``H x W`` extent."""
    if x.ndim < 3:
        raise ShapeError(f"instance_norm needs [..., C, H, W], got {x.shape}")
    if x.shape[-1] * x.shape[-2] < 2:
        raise ShapeError(f"instance_norm needs H*W >= 2, got plane {x.shape[-2:]}")
    axes = (-2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    affine = gamma is not None
    if affine:
        gv = gamma.data[:, None, None]
        out = gv * xhat + beta.data[:, None, None]
    else:
        out = xhat

    def backward(g):
        gxhat = g * gv if affine else g
        gx = inv * (
            gxhat
            - gxhat.mean(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
        )
        if not affine:
            return (gx,)
        red = tuple(range(x.ndim - 3)) + (-2, -1)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    parents = (x, gamma, beta) if affine else (x,)
    return make(out, parents, backward)


# -- distances --------------------------------------------------------------
def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # zero distance contributes a zero subgradient
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distances between rows: ``N x D`` and ``M x D`` -> ``N x M``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_distance: {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))

    def backward(g):
        unit = _safe_div(diff, d[:, :, None])
        w = g[:, :, None] * unit
        return w.sum(axis=1), -w.sum(axis=0)

    return make(d, (a, b), backward)


def row_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between matching rows of two ``N x D`` tensors."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"row_distance: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=-1))

    def backward(g):
        w = g[:, None] * _safe_div(diff, d[:, None])
        return w, -w

    return make(d, (a, b), backward)


# -- classification ---------------------------------------------------------
def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the labelled class."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, labels])

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
