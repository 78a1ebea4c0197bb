"""Hot numeric kernels: 2-D convolution and the selective-scan recurrence.

Every kernel exists twice — a numba ``@njit(cache=True)`` build and a pure-numpy
twin computing the same math. The active backend is chosen once at import time
from the ``STATETRACK_BACKEND`` environment variable:

* ``auto``  (default) — each kernel on its measured-faster build when numba
  imports (scan on numba, conv on numpy/BLAS), plain numpy otherwise
* ``numba`` — force every kernel onto the numba build, raise if missing
* ``numpy`` — force the fallback even when numba is available

Both paths are deterministic (fixed loop order, no threading), so a fixed
backend gives bit-identical results run to run. ``benchmarks/bench_kernels.py``
times the two builds against each other.
"""

import os

import numpy as np

from ..errors import ConfigurationError

_FLAG = os.environ.get("STATETRACK_BACKEND", "auto").lower()
if _FLAG not in ("auto", "numba", "numpy"):
    raise ConfigurationError(
        f"STATETRACK_BACKEND must be auto, numba, or numpy (got {_FLAG!r})"
    )

HAVE_NUMBA = False
if _FLAG in ("auto", "numba"):
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:
        if _FLAG == "numba":
            raise ConfigurationError("STATETRACK_BACKEND=numba but numba is not installed")

USE_NUMBA = HAVE_NUMBA and _FLAG != "numpy"


def active_backend():
    """Backend chosen at import time: numpy, numba, or mixed (auto default).

    Mixed means each kernel runs its faster build: the scan on numba, conv
    on the BLAS-backed numpy path (see the dispatch note at the bottom).
    """
    if _FLAG == "numba":
        return "numba"
    if _FLAG == "auto" and HAVE_NUMBA:
        return "mixed"
    return "numpy"


# ---------------------------------------------------------------------------
# conv2d, numpy build (im2col)
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, stride):
    # x already padded. Returns (B, C, kh, kw, Ho, Wo) strided view copy.
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols, ho, wo


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward_numpy(x, w, stride, pad):
    xp = _pad_hw(x, pad)
    cols, ho, wo = _im2col(xp, w.shape[2], w.shape[3], stride)
    out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))  # (B, Ho, Wo, Co)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input_numpy(dout, w, x_shape, stride, pad):
    b, c, h, wd = x_shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = dout.shape[2], dout.shape[3]
    # (B,Co,Ho,Wo) x (Co,C,kh,kw) -> (B,Ho,Wo,C,kh,kw)
    dcols = np.tensordot(dout, w, axes=([1], [0]))
    dxp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


def conv2d_backward_weight_numpy(dout, x, w_shape, stride, pad):
    xp = _pad_hw(x, pad)
    cols, _, _ = _im2col(xp, w_shape[2], w_shape[3], stride)
    # (B,Co,Ho,Wo) x (B,C,kh,kw,Ho,Wo) -> (Co,C,kh,kw)
    return np.tensordot(dout, cols, axes=([0, 2, 3], [0, 4, 5]))


# ---------------------------------------------------------------------------
# conv2d, numba build (direct loops; accumulate in output dtype)
# ---------------------------------------------------------------------------

if USE_NUMBA:

    # loop order puts the output row innermost so reads/writes stay contiguous

    @njit(cache=True, fastmath=True)
    def _nb_conv2d_fwd(xp, w, stride, ho, wo):
        b, ci, _, _ = xp.shape
        co, _, kh, kw = w.shape
        out = np.zeros((b, co, ho, wo), dtype=xp.dtype)
        for bb in range(b):
            for oc in range(co):
                for ic in range(ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[oc, ic, ky, kx]
                            for oy in range(ho):
                                iy = oy * stride + ky
                                for ox in range(wo):
                                    out[bb, oc, oy, ox] += wv * xp[bb, ic, iy, ox * stride + kx]
        return out

    @njit(cache=True, fastmath=True)
    def _nb_conv2d_bwd_input(dout, w, b, ci, hp, wp, stride):
        co, _, kh, kw = w.shape
        ho, wo = dout.shape[2], dout.shape[3]
        dxp = np.zeros((b, ci, hp, wp), dtype=dout.dtype)
        for bb in range(b):
            for oc in range(co):
                for ic in range(ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[oc, ic, ky, kx]
                            for oy in range(ho):
                                iy = oy * stride + ky
                                for ox in range(wo):
                                    dxp[bb, ic, iy, ox * stride + kx] += wv * dout[bb, oc, oy, ox]
        return dxp

    @njit(cache=True, fastmath=True)
    def _nb_conv2d_bwd_weight(dout, xp, co, ci, kh, kw, stride):
        b = xp.shape[0]
        ho, wo = dout.shape[2], dout.shape[3]
        dw = np.zeros((co, ci, kh, kw), dtype=dout.dtype)
        for oc in range(co):
            for ic in range(ci):
                for ky in range(kh):
                    for kx in range(kw):
                        acc = dout.dtype.type(0.0)
                        for bb in range(b):
                            for oy in range(ho):
                                iy = oy * stride + ky
                                for ox in range(wo):
                                    acc += dout[bb, oc, oy, ox] * xp[bb, ic, iy, ox * stride + kx]
                        dw[oc, ic, ky, kx] = acc
        return dw

    def conv2d_forward_numba(x, w, stride, pad):
        xp = np.ascontiguousarray(_pad_hw(x, pad))
        ho = (xp.shape[2] - w.shape[2]) // stride + 1
        wo = (xp.shape[3] - w.shape[3]) // stride + 1
        return _nb_conv2d_fwd(xp, np.ascontiguousarray(w), stride, ho, wo)

    def conv2d_backward_input_numba(dout, w, x_shape, stride, pad):
        b, c, h, wd = x_shape
        dxp = _nb_conv2d_bwd_input(
            np.ascontiguousarray(dout), np.ascontiguousarray(w),
            b, c, h + 2 * pad, wd + 2 * pad, stride,
        )
        if pad:
            return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
        return dxp

    def conv2d_backward_weight_numba(dout, x, w_shape, stride, pad):
        xp = np.ascontiguousarray(_pad_hw(x, pad))
        return _nb_conv2d_bwd_weight(
            np.ascontiguousarray(dout), xp, w_shape[0], w_shape[1], w_shape[2], w_shape[3], stride
        )


# ---------------------------------------------------------------------------
# selective scan, numpy build
#
# Shapes: u, delta (B,T,d); A (d,N); Bm, Cm (B,T,N); D (d,).
# Recurrence with zero initial state and zero-order-hold discretization:
#   h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
#   y_t = sum_n C_t[n] * h_t[:, n] + D * u_t
# Forward also returns every h_t (B,T,d,N); backward consumes them.
# ---------------------------------------------------------------------------

def selective_scan_forward_numpy(u, delta, A, Bm, Cm, D):
    b, t, d = u.shape
    n = A.shape[1]
    hs = np.empty((b, t, d, n), dtype=u.dtype)
    y = np.empty((b, t, d), dtype=u.dtype)
    h = np.zeros((b, d, n), dtype=u.dtype)
    for k in range(t):
        dab = np.exp(delta[:, k, :, None] * A[None])            # (B,d,N)
        dbu = delta[:, k, :, None] * Bm[:, k, None, :] * u[:, k, :, None]
        h = dab * h + dbu
        hs[:, k] = h
        y[:, k] = np.einsum("bdn,bn->bd", h, Cm[:, k]) + D[None] * u[:, k]
    return y, hs


def selective_scan_backward_numpy(u, delta, A, Bm, Cm, D, hs, dy):
    b, t, d = u.shape
    n = A.shape[1]
    du = np.zeros_like(u)
    ddelta = np.zeros_like(delta)
    dA = np.zeros_like(A)
    dB = np.zeros_like(Bm)
    dC = np.zeros_like(Cm)
    dD = np.zeros_like(D)
    dh = np.zeros((b, d, n), dtype=u.dtype)
    for k in range(t - 1, -1, -1):
        g = dy[:, k]                                            # (B,d)
        dD += np.sum(g * u[:, k], axis=0)
        du[:, k] += g * D[None]
        dC[:, k] += np.einsum("bd,bdn->bn", g, hs[:, k])
        dh += g[:, :, None] * Cm[:, k, None, :]
        hprev = hs[:, k - 1] if k > 0 else np.zeros((b, d, n), dtype=u.dtype)
        dab = np.exp(delta[:, k, :, None] * A[None])
        dh_dab = dh * hprev                                     # grad wrt exp(delta*A)
        ddelta[:, k] += (
            np.einsum("bdn,dn->bd", dh_dab * dab, A)
            + np.sum(dh * Bm[:, k, None, :], axis=2) * u[:, k]
        )
        dA += np.einsum("bdn,bd->dn", dh_dab * dab, delta[:, k])
        dB[:, k] += np.einsum("bdn,bd->bn", dh, delta[:, k] * u[:, k])
        du[:, k] += np.sum(dh * Bm[:, k, None, :], axis=2) * delta[:, k]
        dh = dh * dab
    return du, ddelta, dA, dB, dC, dD


# ---------------------------------------------------------------------------
# selective scan, numba build
# ---------------------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True)
    def _nb_scan_fwd(u, delta, A, Bm, Cm, D):
        b, t, d = u.shape
        n = A.shape[1]
        hs = np.empty((b, t, d, n), dtype=u.dtype)
        y = np.empty((b, t, d), dtype=u.dtype)
        for bb in range(b):
            h = np.zeros((d, n), dtype=u.dtype)
            for k in range(t):
                for i in range(d):
                    dt = delta[bb, k, i]
                    xv = u[bb, k, i]
                    acc = y.dtype.type(0)
                    for j in range(n):
                        hnew = np.exp(dt * A[i, j]) * h[i, j] + dt * Bm[bb, k, j] * xv
                        h[i, j] = hnew
                        hs[bb, k, i, j] = hnew
                        acc += Cm[bb, k, j] * hnew
                    y[bb, k, i] = acc + D[i] * xv
        return y, hs

    @njit(cache=True)
    def _nb_scan_bwd(u, delta, A, Bm, Cm, D, hs, dy):
        b, t, d = u.shape
        n = A.shape[1]
        du = np.zeros_like(u)
        ddelta = np.zeros_like(delta)
        dA = np.zeros_like(A)
        dB = np.zeros_like(Bm)
        dC = np.zeros_like(Cm)
        dD = np.zeros_like(D)
        for bb in range(b):
            dh = np.zeros((d, n), dtype=u.dtype)
            for k in range(t - 1, -1, -1):
                for i in range(d):
                    g = dy[bb, k, i]
                    xv = u[bb, k, i]
                    dt = delta[bb, k, i]
                    dD[i] += g * xv
                    du[bb, k, i] += g * D[i]
                    dd = du.dtype.type(0)
                    for j in range(n):
                        hcur = hs[bb, k, i, j]
                        dC[bb, k, j] += g * hcur
                        dhij = dh[i, j] + g * Cm[bb, k, j]
                        if k > 0:
                            hprev = hs[bb, k - 1, i, j]
                        else:
                            hprev = u.dtype.type(0)
                        ab = np.exp(dt * A[i, j])
                        dd += dhij * hprev * ab * A[i, j] + dhij * Bm[bb, k, j] * xv
                        dA[i, j] += dhij * hprev * ab * dt
                        dB[bb, k, j] += dhij * dt * xv
                        du[bb, k, i] += dhij * dt * Bm[bb, k, j]
                        dh[i, j] = dhij * ab
                    ddelta[bb, k, i] += dd
        return du, ddelta, dA, dB, dC, dD

    def selective_scan_forward_numba(u, delta, A, Bm, Cm, D):
        return _nb_scan_fwd(
            np.ascontiguousarray(u), np.ascontiguousarray(delta), np.ascontiguousarray(A),
            np.ascontiguousarray(Bm), np.ascontiguousarray(Cm), np.ascontiguousarray(D),
        )

    def selective_scan_backward_numba(u, delta, A, Bm, Cm, D, hs, dy):
        return _nb_scan_bwd(
            np.ascontiguousarray(u), np.ascontiguousarray(delta), np.ascontiguousarray(A),
            np.ascontiguousarray(Bm), np.ascontiguousarray(Cm), np.ascontiguousarray(D),
            np.ascontiguousarray(hs), np.ascontiguousarray(dy),
        )


# ---------------------------------------------------------------------------
# dispatch
#
# "numba"/"numpy" force one build for everything. "auto" assigns each kernel
# its measured winner: the sequential scan compiles well (about 4x faster at
# window length 500), while conv at these shapes loses to the BLAS-backed
# im2col build, so auto keeps conv on numpy. bench_kernels.py reproduces the
# numbers behind this split.
# ---------------------------------------------------------------------------

if _FLAG == "numba" or (_FLAG == "auto" and HAVE_NUMBA):
    selective_scan_forward = selective_scan_forward_numba
    selective_scan_backward = selective_scan_backward_numba
else:
    selective_scan_forward = selective_scan_forward_numpy
    selective_scan_backward = selective_scan_backward_numpy

if _FLAG == "numba":
    conv2d_forward = conv2d_forward_numba
    conv2d_backward_input = conv2d_backward_input_numba
    conv2d_backward_weight = conv2d_backward_weight_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward_input = conv2d_backward_input_numpy
    conv2d_backward_weight = conv2d_backward_weight_numpy
