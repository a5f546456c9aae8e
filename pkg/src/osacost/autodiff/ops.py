"""Differentiable operations on :class:`Tensor`.

Broadcasting follows numpy for the elementwise ops (``add``, ``sub``,
``mul``); gradients are summed back to each operand's shape. Everything
else expects exact shapes.
"""

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _sum_to_shape(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _sum_to_shape(g, sa), _sum_to_shape(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), bw)


def sub(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _sum_to_shape(g, sa), _sum_to_shape(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), bw)


def mul(a, b):
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    _broadcast_shape(a, b)

    def bw(g):
        ga = _sum_to_shape(g * b.data, a.shape) if a.requires_grad else None
        gb = _sum_to_shape(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), bw)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    return Tensor._from_op(a.data * a.dtype.type(s), (a,), lambda g: (g * s,))


def exp(a):
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    return Tensor._from_op(np.log(x), (a,), lambda g: (g / x,))


def log10(a):
    x = a.data
    c = 1.0 / np.log(10.0)
    return Tensor._from_op(np.log10(x), (a,), lambda g: (g * c / x,))


def square(a):
    x = a.data
    return Tensor._from_op(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    pos = a.data > 0
    return Tensor._from_op(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),))


def clamp_min(a, lo):
    """max(a, lo) elementwise; gradient passes where a > lo."""
    keep = a.data > lo
    out = np.where(keep, a.data, a.dtype.type(lo))
    return Tensor._from_op(out, (a,), lambda g: (g * keep,))


# -- shape ----------------------------------------------------------------

def reshape(a, shape):
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                           lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index):
    """Slice or index ``a`` (numpy semantics)."""
    shape = a.shape
    basic = _is_basic_index(index)
    out = a.data[index]
    out = np.ascontiguousarray(out) if isinstance(out, np.ndarray) else np.asarray(out, dtype=a.dtype)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out, (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise ShapeError(f"concat shape mismatch {[x.shape for x in tensors]}")
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def flip(a, axis):
    return Tensor._from_op(np.ascontiguousarray(np.flip(a.data, axis)), (a,),
                           lambda g: (np.flip(g, axis),))


# -- reductions -----------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return Tensor._from_op(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    """Matrix product with optional shared leading batch dims.

    ``b`` may be 2-D (a weight shared over ``a``'s leading dims) or have the
    same leading dims as ``a``.
    """
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    elif a.ndim == 2 and b.ndim > 2:
        raise ShapeError("left operand must carry the batch dims")
    else:
        out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                # one flat GEMM instead of a broadcast loop over the batch
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(out, (a, b), bw)


def linear(x, weight, bias=None):
    """x @ weight (+ bias). ``weight`` is [in, out]."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def embedding(weight, ids):
    """Row lookup ``weight[ids]``; ids is an integer array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    rows = weight.shape
    flat = ids.reshape(-1)
    order = np.argsort(flat, kind="stable")
    uniq, starts = np.unique(flat[order], return_index=True)

    def bw(g):
        # scatter-add by sorted segments; much faster than np.add.at
        full = np.zeros(rows, dtype=g.dtype)
        if flat.size:
            full[uniq] = np.add.reduceat(g.reshape(-1, rows[1])[order], starts, axis=0)
        return (full,)

    return Tensor._from_op(weight.data[ids], (weight,), bw)


# -- normalisation / activations backed by kernels ------------------------

def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what}: non-finite input")


def softmax(a, axis=-1):
    """Max-shifted softmax along ``axis`` (last axis fast path)."""
    _check_finite(a.data, "softmax")
    if axis not in (-1, a.ndim - 1):
        return swapaxes(softmax(swapaxes(a, axis, -1)), axis, -1)
    shape = a.shape
    y = kernels.softmax_forward(a.data.reshape(-1, shape[-1])).reshape(shape)

    def bw(g):
        return (kernels.softmax_backward(y.reshape(-1, shape[-1]), g.reshape(-1, shape[-1])).reshape(shape),)

    return Tensor._from_op(y, (a,), bw)


def log_softmax(a):
    _check_finite(a.data, "log_softmax")
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (a,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    shape = x.shape
    d = shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params must be ({d},)")
    y, xhat, rstd = kernels.layernorm_forward(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def bw(g):
        gx, gg, gb = kernels.layernorm_backward(g.reshape(-1, d), xhat, rstd, gamma.data)
        return gx.reshape(shape), gg, gb

    return Tensor._from_op(y.reshape(shape), (x, gamma, beta), bw)


def dropout(x, p, rng, training=True):
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,))


def lstm(xw, wh, mask, h0=None, c0=None):
    """Masked LSTM recurrence; returns hidden states [B, L, H].

    ``xw`` is the precomputed input projection plus bias, [B, L, 4H], gate
    order (i, f, g, o). ``wh`` is [H, 4H]. Positions where ``mask`` is 0
    carry the previous state through unchanged, so left-aligned padding
    leaves the last real state at index L-1.
    """
    B, L, G = xw.shape
    if G % 4 or wh.shape != (G // 4, G):
        raise ShapeError(f"lstm shapes xw={xw.shape} wh={wh.shape}")
    H = G // 4
    dt = xw.dtype
    h0 = _t(np.zeros((B, H), dtype=dt), xw) if h0 is None else h0
    c0 = _t(np.zeros((B, H), dtype=dt), xw) if c0 is None else c0
    mask = np.asarray(mask, dtype=dt)
    if B == 0 or L == 0:
        impl_fwd, impl_bwd = kernels._kernels_py.lstm_forward, kernels._kernels_py.lstm_backward
    else:
        impl_fwd, impl_bwd = kernels.lstm_forward, kernels.lstm_backward
    hs, cs, acts, tanh_c = impl_fwd(xw.data, wh.data, mask, h0.data, c0.data)

    def bw(g):
        gxw, gwh, gh0, gc0 = impl_bwd(g, acts, tanh_c, hs, cs, mask, wh.data, h0.data, c0.data)
        return gxw, gwh, gh0, gc0

    return Tensor._from_op(hs, (xw, wh, h0, c0), bw)


# -- losses ---------------------------------------------------------------

def cross_entropy_logits(logits, targets, mask):
    """Per-patient-normalised cross entropy.

    Args:
        logits: [batch, classes, positions].
        targets: integer class ids, [batch, positions].
        mask: 1 on scored positions, 0 on padding, [batch, positions].

    Returns:
        Scalar: mean over patients (with at least one scored position) of
        the mean negative log-likelihood over that patient's positions.
    """
    B, C, P = logits.shape
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=logits.dtype)
    if targets.shape != (B, P) or mask.shape != (B, P):
        raise ShapeError(f"targets/mask must be {(B, P)}")
    live = mask > 0
    if np.any(targets[live] < 0) or np.any(targets[live] >= C):
        raise IndexError(f"target id out of class range [0, {C})")
    _check_finite(logits.data, "cross_entropy_logits")
    x = np.swapaxes(logits.data, 1, 2)  # [B, P, C]
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    safe_t = np.where(live, targets, 0)
    picked = np.take_along_axis(shifted, safe_t[..., None], axis=-1)[..., 0]
    nll = (logz - picked) * mask
    k = mask.sum(axis=1)
    has = k > 0
    n = max(int(has.sum()), 1)
    w = np.where(has, 1.0 / np.where(has, k, 1.0), 0.0) / n  # [B]
    loss = np.asarray((nll.sum(axis=1) * w).sum(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(shifted - logz[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        gx = (p - onehot) * (mask * w[:, None])[..., None] * g
        return (np.swapaxes(gx, 1, 2).astype(logits.dtype),)

    return Tensor._from_op(loss, (logits,), bw)
