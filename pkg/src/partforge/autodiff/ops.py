"""Differentiable primitives.

Every primitive computes its forward value with numpy and registers a closure
returning one gradient per input (``None`` for constants). Reductions and
normalization statistics accumulate in float64; outputs keep the input dtype.
"""
from __future__ import annotations

import builtins
from itertools import product
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make


class ShapeError(ValueError):
    pass


class BranchPins:
    """Selections made by piecewise primitives (relu, clip, max, max_pool3d).

    While recording, each selection is logged in call order. While replaying,
    the logged selection is used instead of the one the current input implies,
    which keeps a perturbed evaluation on the base point's smooth piece.
    """

    def __init__(self):
        self.log: list[np.ndarray] = []
        self.cursor: int | None = None

    def replay(self):
        self.cursor = 0

    def take(self, choice: np.ndarray) -> np.ndarray:
        if self.cursor is None:
            self.log.append(choice)
            return choice
        if self.cursor >= len(self.log) or self.log[self.cursor].shape != choice.shape:
            raise RuntimeError("pinned replay diverged from the recorded call sequence")
        pinned = self.log[self.cursor]
        self.cursor += 1
        return pinned


_PINS: BranchPins | None = None


def set_branch_pins(pins: BranchPins | None) -> BranchPins | None:
    global _PINS
    prev, _PINS = _PINS, pins
    return prev


def _select(choice: np.ndarray) -> np.ndarray:
    return choice if _PINS is None else _PINS.take(choice)


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# element-wise


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        out = a.data + b.data.astype(a.dtype, copy=False)
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        out = a.data - b.data.astype(a.dtype, copy=False)
    except ValueError:
        raise _shape_error("sub", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        out = a.data * b.data.astype(a.dtype, copy=False)
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape) from None

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make("mul", out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    pos = _select(x.data > 0)

    def backward(g):
        return (g * pos,)

    return make("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        return (g * y * (1 - y),)

    return make("sigmoid", y, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    # 0 inside, 1 below, 2 above
    side = _select(np.where(x.data < lo, 1, np.where(x.data > hi, 2, 0)).astype(np.int8))
    inside = side == 0

    def backward(g):
        return (g * inside,)

    out = np.where(inside, x.data, np.where(side == 1, lo, hi)).astype(x.dtype)
    return make("clip", out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make("softmax", y, (x,), backward)


# ---------------------------------------------------------------------------
# structural


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", x.shape, shape) from None
    return make("reshape", out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return make("transpose", x.data.transpose(axes), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return make("concat", out, tensors, backward)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim > 1 and axis != 0:
        raise ShapeError("take: multi-dimensional indices only supported on axis 0")
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        return (gx,)

    return make("take", out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return make("mean", out, (x,), backward)


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Max along one axis; ties send the gradient to the first maximum."""
    arg = _select(np.argmax(x.data, axis=axis))
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make("max", out, (x,), backward)


# ---------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape)
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2
        gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make("linear", out, inputs, backward)


# ---------------------------------------------------------------------------
# 3D convolution


def conv_output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def _window(arr, a, b, c, n_out, stride):
    d, h, w = n_out
    s = stride
    return arr[:, :, a : a + s * (d - 1) + 1 : s, b : b + s * (h - 1) + 1 : s, c : c + s * (w - 1) + 1 : s]


_COLS_BUDGET = 1 << 25  # bytes of im2col buffer per chunk


def _im2col(xt, n0, n1, kernel, n_out, stride):
    """(k^3 * C, nb * prod(n_out)) patch matrix for batch rows [n0, n1) of a padded (C, N, ...) array."""
    k1, k2, k3 = kernel
    c = xt.shape[0]
    cols = np.empty((k1, k2, k3, c, n1 - n0) + n_out, dtype=xt.dtype)
    for a, b, cc in product(range(k1), range(k2), range(k3)):
        cols[a, b, cc] = _window(xt[:, n0:n1], a, b, cc, n_out, stride)
    return cols.reshape(k1 * k2 * k3 * c, -1)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over (N, C, D, H, W) with a cubic kernel (O, C, k, k, k).

    Evaluated as one GEMM per batch chunk on an im2col patch matrix.
    """
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv3d", x.shape, weight.shape)
    n, c = x.shape[:2]
    o, _, k1, k2, k3 = weight.shape
    kernel = (k1, k2, k3)
    spatial = x.shape[2:]
    n_out = tuple(conv_output_size(s, k, stride, padding) for s, k in zip(spatial, kernel))
    if min(n_out) < 1:
        raise _shape_error("conv3d", x.shape, weight.shape)
    p = padding
    vol = int(np.prod(n_out))
    xt = x.data.transpose(1, 0, 2, 3, 4)
    if p:
        xt = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    w = weight.data
    wm = w.transpose(0, 2, 3, 4, 1).reshape(o, -1)
    pointwise = kernel == (1, 1, 1) and stride == 1
    row_bytes = wm.shape[1] * vol * xt.itemsize
    chunk = n if pointwise else builtins.max(1, _COLS_BUDGET // builtins.max(row_bytes, 1))
    bounds = [(i, builtins.min(n, i + chunk)) for i in range(0, n, chunk)]

    def cols_of(n0, n1):
        if pointwise:
            return xt[:, n0:n1].reshape(c, -1)
        return _im2col(xt, n0, n1, kernel, n_out, stride)

    out = np.empty((o, n * vol), dtype=x.dtype)
    for n0, n1 in bounds:
        out[:, n0 * vol:n1 * vol] = wm @ cols_of(n0, n1)
    out = out.reshape((o, n) + n_out).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gt = g.transpose(1, 0, 2, 3, 4).reshape(o, -1)
        gwm = np.zeros_like(wm)
        gxt = np.zeros_like(xt) if x.requires_grad else None
        for n0, n1 in bounds:
            gs = gt[:, n0 * vol:n1 * vol]
            gwm += gs @ cols_of(n0, n1).T
            if gxt is None:
                continue
            gcols = wm.T @ gs
            if pointwise:
                gxt[:, n0:n1] = gcols.reshape((c, n1 - n0) + n_out)
                continue
            gcols = gcols.reshape((k1, k2, k3, c, n1 - n0) + n_out)
            sub = gxt[:, n0:n1]
            for a, b, cc in product(range(k1), range(k2), range(k3)):
                _window(sub, a, b, cc, n_out, stride)[...] += gcols[a, b, cc]
        gw = np.ascontiguousarray(gwm.reshape(o, k1, k2, k3, c).transpose(0, 4, 1, 2, 3))
        gx = None
        if gxt is not None:
            if p:
                gxt = gxt[:, :, p:-p, p:-p, p:-p]
            gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3, 4))
        gb = gt.sum(axis=1, dtype=np.float64).astype(g.dtype) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make("conv3d", out, inputs, backward)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv3d`; weight is (C_in, C_out, k, k, k)."""
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[0]:
        raise _shape_error("conv_transpose3d", x.shape, weight.shape)
    n, ci = x.shape[:2]
    _, co, k1, k2, k3 = weight.shape
    spatial = x.shape[2:]
    full = tuple((s - 1) * stride + k for s, k in zip(spatial, (k1, k2, k3)))
    p = padding
    if min(f - 2 * p for f in full) < 1:
        raise _shape_error("conv_transpose3d", x.shape, weight.shape)
    w = weight.data
    xt = x.data.transpose(1, 0, 2, 3, 4).reshape(ci, -1)
    outp = np.zeros((co, n) + full, dtype=x.dtype)
    offsets = list(product(range(k1), range(k2), range(k3)))
    for a, b, c in offsets:
        _window(outp, a, b, c, spatial, stride)[...] += (w[:, :, a, b, c].T @ xt).reshape((co, n) + spatial)
    if p:
        outp = outp[:, :, p:-p, p:-p, p:-p]
    out = np.ascontiguousarray(outp.transpose(1, 0, 2, 3, 4))
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1, 1)

    def backward(g):
        gp = np.zeros((co, n) + full, dtype=g.dtype)
        inner = g.transpose(1, 0, 2, 3, 4)
        if p:
            gp[:, :, p:-p, p:-p, p:-p] = inner
        else:
            gp[...] = inner
        gw = np.zeros_like(w)
        gxt = np.zeros_like(xt)
        for a, b, c in offsets:
            gs = _window(gp, a, b, c, spatial, stride).reshape(co, -1)
            gxt += w[:, :, a, b, c] @ gs
            gw[:, :, a, b, c] = xt @ gs.T
        gx = np.ascontiguousarray(gxt.reshape((ci, n) + spatial).transpose(1, 0, 2, 3, 4))
        gb = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(g.dtype) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make("conv_transpose3d", out, inputs, backward)


def max_pool3d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride = kernel, no padding)."""
    if kernel == 1:
        return x
    n, c, d, h, w = x.shape
    k = kernel
    if d % k or h % k or w % k or min(d, h, w) < k:
        raise ShapeError(f"max_pool3d: spatial shape {(d, h, w)} not divisible by kernel {k}")
    blocks = x.data.reshape(n, c, d // k, k, h // k, k, w // k, k).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, d // k, h // k, w // k, k ** 3)
    arg = _select(np.argmax(blocks, axis=-1))
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, d // k, h // k, w // k, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(x.shape),)

    return make("max_pool3d", out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization


def default_groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


def _normalize(xr: np.ndarray, axes, eps: float):
    mu = xr.mean(axis=axes, keepdims=True, dtype=np.float64)
    d = xr - mu.astype(xr.dtype)
    var = (d * d).mean(axis=axes, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xr.dtype)
    return d * inv, mu, var, inv


def _normalize_backward(gxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes) -> np.ndarray:
    dt = gxhat.dtype
    m1 = gxhat.mean(axis=axes, keepdims=True, dtype=np.float64).astype(dt)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True, dtype=np.float64).astype(dt)
    return inv * (gxhat - m1 - xhat * m2)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int | None = None, eps: float = 1e-5) -> Tensor:
    n, c = x.shape[:2]
    groups = default_groups(c) if groups is None else groups
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xr = x.data.reshape(n, groups, -1)
    xhat, _, _, inv = _normalize(xr, 2, eps)
    xhat_full = xhat.reshape(x.shape)
    out = (xhat_full * gamma.data.reshape(bshape) + beta.data.reshape(bshape)).astype(x.dtype)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        ggamma = (g * xhat_full).sum(axis=red, dtype=np.float64).astype(g.dtype)
        gbeta = g.sum(axis=red, dtype=np.float64).astype(g.dtype)
        gxhat = (g * gamma.data.reshape(bshape)).reshape(n, groups, -1)
        gx = _normalize_backward(gxhat, xhat, inv, 2).reshape(x.shape)
        return gx, ggamma, gbeta

    return make("group_norm", out, (x, gamma, beta), backward)


class BatchNormState:
    """Running statistics for a batch-norm layer (buffers, not parameters)."""

    def __init__(self, channels: int, momentum: float = 0.9, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool = True,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, spatial).

    Training mode uses batch statistics and updates ``state`` with
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[1]
    bshape = (1, c) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    if training:
        xhat, mu, var, inv = _normalize(x.data, red, eps)
        m = x.size // c
        mom = state.momentum
        unbiased = var.reshape(c) * (m / builtins.max(m - 1, 1))
        state.running_mean[...] = mom * state.running_mean + (1 - mom) * mu.reshape(c)
        state.running_var[...] = mom * state.running_var + (1 - mom) * unbiased
    else:
        inv = (1.0 / np.sqrt(state.running_var.astype(np.float64) + eps)).reshape(bshape).astype(x.dtype)
        xhat = (x.data - state.running_mean.reshape(bshape).astype(x.dtype)) * inv
    out = (xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)).astype(x.dtype)

    def backward(g):
        ggamma = (g * xhat).sum(axis=red, dtype=np.float64).astype(g.dtype)
        gbeta = g.sum(axis=red, dtype=np.float64).astype(g.dtype)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = _normalize_backward(gxhat, xhat, inv, red)
        else:
            gx = gxhat * inv
        return gx.astype(g.dtype), ggamma, gbeta

    return make("batch_norm", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# losses (all return the mean over elements / rows)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z64 = z.astype(np.float64)
    m = z64.max(axis=-1, keepdims=True)
    return z64 - m - np.log(np.exp(z64 - m).sum(axis=-1, keepdims=True))


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``; logits are (N, C)."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise _shape_error("cross_entropy_logits", logits.shape, targets.shape)
    n = len(targets)
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(n), targets].sum() / n

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return ((g * p / n).astype(logits.dtype),)

    return make("cross_entropy_logits", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    t = _data(targets).astype(np.float64)
    z = logits.data.astype(np.float64)
    if t.shape != z.shape:
        raise _shape_error("bce_with_logits", z.shape, t.shape)
    n = z.size
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).sum() / n

    def backward(g):
        return ((g * (_sigmoid(z) - t) / n).astype(logits.dtype),)

    return make("bce_with_logits", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def binary_cross_entropy(probs: Tensor, targets, eps: float = 1e-7) -> Tensor:
    t = _data(targets).astype(np.float64)
    p = np.clip(probs.data.astype(np.float64), eps, 1 - eps)
    if t.shape != p.shape:
        raise _shape_error("binary_cross_entropy", p.shape, t.shape)
    n = p.size
    loss = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum() / n
    raw = probs.data

    def backward(g):
        gp = (-(t / p) + (1 - t) / (1 - p)) / n
        gp = np.where((raw > eps) & (raw < 1 - eps), gp, 0.0)
        return ((g * gp).astype(probs.dtype),)

    return make("binary_cross_entropy", np.asarray(loss, dtype=probs.dtype), (probs,), backward)


def mse(a: Tensor, b) -> Tensor:
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise _shape_error("mse", a.shape, b.shape)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size
    loss = (diff ** 2).sum() / n

    def backward(g):
        gd = (2.0 * g * diff / n)
        return gd.astype(a.dtype), (-gd).astype(b.dtype)

    return make("mse", np.asarray(loss, dtype=a.dtype), (a, b), backward)
