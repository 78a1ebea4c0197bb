"""Differentiable array operations.

Every op takes/returns ``Tensor``, validates shapes up front (raising
``DimensionError`` with the offending shapes), computes the forward value with
numpy (or a kernel from ``kernels``), and attaches an analytic backward
closure when any input requires gradients.

Broadcasting policy for elementwise ops: operands must have equal rank;
size-1 axes broadcast by trailing-dimension alignment. Rank promotion is
explicit (``reshape`` / ``broadcast_to``).

Reductions (``sum``/``mean``) accumulate in float64 and cast back to the input
dtype, so float32 graphs keep long unnormalized sums accurate.
"""

import math

import numpy as np

from ..errors import DimensionError
from . import kernels
from .tensor import Tensor


def _out(data, parents, backward):
    t = Tensor(data)
    if any(p.requires_grad for p in parents):
        t._attach(parents, backward)
    return t


def _unbroadcast(g, shape):
    """Reduce g (same or higher rank) down to `shape` by summing broadcast axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _check_pair(a, b, op):
    if a.ndim != b.ndim:
        raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise DimensionError(f"{op}: incompatible shapes {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    _check_pair(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _out(a.data + b.data, (a, b), bw)


def sub(a, b):
    _check_pair(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _out(a.data - b.data, (a, b), bw)


def mul(a, b):
    _check_pair(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _out(a.data * b.data, (a, b), bw)


def div(a, b):
    _check_pair(a, b, "div")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _out(a.data / b.data, (a, b), bw)


def neg(x):
    def bw(g):
        x._accum(-g)

    return _out(-x.data, (x,), bw)


def addc(x, c):
    def bw(g):
        x._accum(g)

    return _out(x.data + x.dtype.type(c), (x,), bw)


def scale(x, c):
    c = x.dtype.type(c)

    def bw(g):
        x._accum(g * c)

    return _out(x.data * c, (x,), bw)


def pow_const(x, p):
    d = np.power(x.data, p)

    def bw(g):
        x._accum(g * p * np.power(x.data, p - 1.0))

    return _out(d, (x,), bw)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def exp(x):
    d = np.exp(x.data)

    def bw(g):
        x._accum(g * d)

    return _out(d, (x,), bw)


def log(x):
    def bw(g):
        x._accum(g / x.data)

    return _out(np.log(x.data), (x,), bw)


def sqrt(x):
    d = np.sqrt(x.data)

    def bw(g):
        x._accum(g * 0.5 / d)

    return _out(d, (x,), bw)


def abs_(x):
    def bw(g):
        x._accum(g * np.sign(x.data))

    return _out(np.abs(x.data), (x,), bw)


def tanh(x):
    d = np.tanh(x.data)

    def bw(g):
        x._accum(g * (1.0 - d * d))

    return _out(d, (x,), bw)


def _sigmoid_np(v):
    # Two-branch form: never exponentiates a large positive value.
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    d = _sigmoid_np(x.data)

    def bw(g):
        x._accum(g * d * (1.0 - d))

    return _out(d, (x,), bw)


def softplus(x):
    # max(x,0) + log1p(exp(-|x|)) is exact and overflow-safe.
    d = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def bw(g):
        x._accum(g * _sigmoid_np(x.data))

    return _out(d, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    inner = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    d = 0.5 * x.data * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        x._accum(g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _out(d, (x,), bw)


def maximum(a, b):
    _check_pair(a, b, "maximum")
    take_a = a.data >= b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _out(np.where(take_a, a.data, b.data), (a, b), bw)


def minimum(a, b):
    _check_pair(a, b, "minimum")
    take_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _out(np.where(take_a, a.data, b.data), (a, b), bw)


def clamp(x, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes through the closed interval."""
    d = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi

    def bw(g):
        x._accum(np.where(inside, g, 0.0))

    return _out(d, (x,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):
    d = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        x._accum(_expand_reduced(g, x.shape, axis, keepdims).astype(x.dtype))

    return _out(d, (x,), bw)


def mean(x, axis=None, keepdims=False):
    d = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= x.shape[a % x.ndim]

    def bw(g):
        x._accum(_expand_reduced(g, x.shape, axis, keepdims).astype(x.dtype) / count)

    return _out(d, (x,), bw)


def softmax(x, axis=-1):
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    d = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * d, axis=axis, keepdims=True)
        x._accum(d * (g - dot))

    return _out(d, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _swap_last2(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need rank>=2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    d = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, _swap_last2(b.data)), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(_swap_last2(a.data), g), b.shape))

    return _out(d, (a, b), bw)


def attention(q, k, v):
    """Scaled dot-product attention over the second-to-last axis as tokens.

    q (..., Nq, d), k (..., Nk, d), v (..., Nk, dv) -> (..., Nq, dv).
    Scale is 1/sqrt(d). Softmax rows sum to 1 by construction.
    """
    if not (q.ndim == k.ndim == v.ndim) or q.ndim < 2:
        raise DimensionError(f"attention: ranks q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: q/k feature dims differ, q{q.shape} k{k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: k/v token counts differ, k{k.shape} v{v.shape}")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise DimensionError(f"attention: batch dims differ, q{q.shape} k{k.shape} v{v.shape}")
    kt_axes = tuple(range(q.ndim - 2)) + (q.ndim - 1, q.ndim - 2)
    scores = scale(matmul(q, transpose(k, kt_axes)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape):
    d = x.data.reshape(shape)

    def bw(g):
        x._accum(g.reshape(x.shape))

    return _out(d, (x,), bw)


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        x._accum(g.transpose(inv))

    return _out(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


def flip(x, axis):
    def bw(g):
        x._accum(np.flip(g, axis=axis))

    return _out(np.ascontiguousarray(np.flip(x.data, axis=axis)), (x,), bw)


def broadcast_to(x, shape):
    d = np.broadcast_to(x.data, shape)

    def bw(g):
        x._accum(_unbroadcast(g, x.shape))

    return _out(np.ascontiguousarray(d), (x,), bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty input list")
    nd = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != nd:
            raise DimensionError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[axis] = slice(int(lo), int(hi))
                t._accum(g[tuple(sl)])

    return _out(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}:{start + length}) outside axis {axis} of {x.shape}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[sl] = g
        x._accum(full)

    return _out(np.ascontiguousarray(x.data[sl]), (x,), bw)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis; gamma/beta shaped (D,)."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs feature {x.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        if gamma.requires_grad:
            gamma._accum(np.sum(g * xhat, axis=lead))
        if beta.requires_grad:
            beta._accum(np.sum(g, axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accum((dxhat - m1 - xhat * m2) * inv)

    return _out(d, (x, gamma, beta), bw)


def group_norm(x, num_groups, gamma, beta, eps=1e-5):
    """Normalize (B, C, *spatial) per sample over channel groups."""
    if x.ndim < 2:
        raise DimensionError(f"group_norm: need (B,C,...), got {x.shape}")
    b, c = x.shape[0], x.shape[1]
    if c % num_groups:
        raise DimensionError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"group_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {c}"
        )
    grouped = x.data.reshape(b, num_groups, -1)
    mu = grouped.mean(axis=-1, keepdims=True)
    gc = grouped - mu
    var = np.mean(gc * gc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (gc * inv).reshape(x.shape)
    aff_shape = (1, c) + (1,) * (x.ndim - 2)
    d = xhat * gamma.data.reshape(aff_shape) + beta.data.reshape(aff_shape)

    def bw(g):
        red = (0,) + tuple(range(2, x.ndim))
        if gamma.requires_grad:
            gamma._accum(np.sum(g * xhat, axis=red))
        if beta.requires_grad:
            beta._accum(np.sum(g, axis=red))
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(aff_shape)).reshape(b, num_groups, -1)
            xh = xhat.reshape(b, num_groups, -1)
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xh).mean(axis=-1, keepdims=True)
            x._accum(((dxhat - m1 - xh * m2) * inv).reshape(x.shape))

    return _out(d, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def avg_pool2d(x, k):
    """Non-overlapping k x k average pool on (B, C, H, W); H, W divisible by k."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d: need (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by window {k}")
    d = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        x._accum(np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k))

    return _out(d, (x,), bw)


# ---------------------------------------------------------------------------
# convolution and correlation (kernel-backed)
# ---------------------------------------------------------------------------

def conv2d(x, w, stride=1, pad=0):
    """2-D cross-correlation: x (B,Ci,H,W) with w (Co,Ci,kh,kw) -> (B,Co,Ho,Wo)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: need 4-D x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: channel mismatch x{x.shape} w{w.shape}")
    if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    d = kernels.conv2d_forward(x.data, w.data, stride, pad)

    def bw(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accum(kernels.conv2d_backward_input(g, w.data, x.shape, stride, pad))
        if w.requires_grad:
            w._accum(kernels.conv2d_backward_weight(g, x.data, w.shape, stride, pad))

    return _out(d, (x, w), bw)


def depthwise_xcorr(x, k):
    """Per-channel 'same' correlation of x (B,C,H,W) with kernels k (B,C,kh,kw)."""
    if x.ndim != 4 or k.ndim != 4 or x.shape[:2] != k.shape[:2]:
        raise DimensionError(f"depthwise_xcorr: shapes x{x.shape} k{k.shape}")
    b, c, h, w = x.shape
    kh, kw = k.shape[2], k.shape[3]
    pt, pb = (kh - 1) // 2, kh // 2
    pl, pr = (kw - 1) // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    d = np.einsum("bchwij,bcij->bchw", win, k.data)

    def bw(g):
        if k.requires_grad:
            k._accum(np.einsum("bchw,bchwij->bcij", g, win))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for ky in range(kh):
                for kx in range(kw):
                    dxp[:, :, ky : ky + h, kx : kx + w] += (
                        g * k.data[:, :, ky, kx][:, :, None, None]
                    )
            x._accum(dxp[:, :, pt : pt + h, pl : pl + w])

    return _out(d, (x, k), bw)


# ---------------------------------------------------------------------------
# selective scan (kernel-backed)
# ---------------------------------------------------------------------------

def selective_scan(u, delta, A, Bm, Cm, D):
    """Input-dependent linear recurrence over the time axis.

    u, delta (B,T,d); A (d,N); Bm, Cm (B,T,N); D (d,) -> y (B,T,d).
    State starts at zero; discretization is zero-order hold
    (h_t = exp(delta*A) h_{t-1} + delta*B*u).
    """
    if u.ndim != 3 or u.shape != delta.shape:
        raise DimensionError(f"selective_scan: u{u.shape} delta{delta.shape}")
    bsz, t, dch = u.shape
    n = A.shape[1] if A.ndim == 2 else -1
    if A.shape != (dch, n) or Bm.shape != (bsz, t, n) or Cm.shape != (bsz, t, n):
        raise DimensionError(
            f"selective_scan: A{A.shape} B{Bm.shape} C{Cm.shape} vs u{u.shape}"
        )
    if D.shape != (dch,):
        raise DimensionError(f"selective_scan: D{D.shape} vs channels {dch}")
    y, hs = kernels.selective_scan_forward(u.data, delta.data, A.data, Bm.data, Cm.data, D.data)

    def bw(g):
        du, ddelta, dA, dB, dC, dD = kernels.selective_scan_backward(
            u.data, delta.data, A.data, Bm.data, Cm.data, D.data, hs, np.ascontiguousarray(g)
        )
        if u.requires_grad:
            u._accum(du)
        if delta.requires_grad:
            delta._accum(ddelta)
        if A.requires_grad:
            A._accum(dA)
        if Bm.requires_grad:
            Bm._accum(dB)
        if Cm.requires_grad:
            Cm._accum(dC)
        if D.requires_grad:
            D._accum(dD)

    return _out(y, (u, delta, A, Bm, Cm, D), bw)
