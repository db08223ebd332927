# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for fake quantization and convolution lowering.

Every routine here has a numpy twin in :mod:`cptlab.kernels`; both must
produce bit-identical results, so the arithmetic order is kept the same.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport copysign, copysignf, nearbyint, nearbyintf

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline real _rint(real v) noexcept nogil:
    # (v + M) - M rounds half-to-even in IEEE default mode when |v| < M / 3;
    # copysign restores the -0.0 that rint gives for small negative inputs
    cdef float mf = 12582912.0            # 1.5 * 2**23
    cdef double md = 6755399441055744.0   # 1.5 * 2**52
    if real is float:
        if -4194304.0 < v < 4194304.0:
            return copysignf((v + mf) - mf, v)
        return nearbyintf(v)
    else:
        if -2251799813685248.0 < v < 2251799813685248.0:
            return copysign((v + md) - md, v)
        return nearbyint(v)


cdef inline bint _fast_round_ok(real limit) noexcept nogil:
    if real is float:
        return limit < 4194304.0
    else:
        return limit < 2251799813685248.0


def quantize_nearest(real[::1] x, real[::1] out, double scale, double peak,
                     long qmin, long qmax):
    """Round ``x / scale`` half-to-even, clamp to [qmin, qmax], rescale.

    Extreme levels are pinned to ``+-peak`` so a second pass sees the same scale.
    """
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real s = <real>scale
    cdef real p = <real>peak
    cdef real lo = <real>qmin, hi = <real>qmax
    cdef real top = p if qmax > 0 else hi * s
    cdef real bottom = -p if qmin < 0 else lo * s
    cdef real v, q
    cdef float mf = 12582912.0
    cdef double md = 6755399441055744.0
    with nogil:
        if _fast_round_ok(hi + 2):
            # |x / s| <= qmax (+ rounding slack), so the magic-constant rint is exact
            for i in range(n):
                if real is float:
                    v = copysignf((x[i] / s + mf) - mf, x[i])
                else:
                    v = copysign((x[i] / s + md) - md, x[i])
                q = v * s
                q = top if v >= hi else q
                q = bottom if v <= lo else q
                out[i] = q
        else:
            for i in range(n):
                v = _rint(x[i] / s)
                q = v * s
                q = top if v >= hi else q
                q = bottom if v <= lo else q
                out[i] = q


def quantize_stochastic(real[::1] x, real[::1] u, real[::1] out, double scale,
                        double peak, long qmax, double snap):
    """Signed stochastic rounding onto the grid ``k * scale``, |k| <= qmax."""
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real s = <real>scale
    cdef real p = <real>peak
    cdef real hi = <real>qmax
    cdef real sn = <real>snap
    cdef real v, r
    cdef float mf = 12582912.0
    cdef double md = 6755399441055744.0
    with nogil:
        if _fast_round_ok(hi + 2):
            for i in range(n):
                v = x[i] / s
                if real is float:
                    r = copysignf((v + mf) - mf, v)
                else:
                    r = copysign((v + md) - md, v)
                out[i] = _stochastic_pick(v, r, u[i], s, p, hi, sn)
        else:
            for i in range(n):
                v = x[i] / s
                out[i] = _stochastic_pick(v, _rint(v), u[i], s, p, hi, sn)


cdef inline real _stochastic_pick(real v, real r, real u, real s, real p, real hi,
                                  real sn) noexcept nogil:
    cdef real fl = r - 1 if r > v else r
    cdef real d = v - r
    cdef real q = fl + 1 if u < v - fl else fl
    q = r if (d <= sn and d >= -sn) else q
    cdef real y = q * s
    y = p if q >= hi else y
    y = -p if q <= -hi else y
    return y


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    """Lower (N, C, H, W) to columns of shape (C*kh*kw, N*Ho*Wo)."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.zeros((C * kh * kw, N * Ho * Wo), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, i, j, oh, ow, h, row, ow_lo, ow_hi, w0
    cdef real* dst
    cdef real* src
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    # output columns whose input column lies inside the image
                    w0 = j - pad
                    ow_lo = 0
                    while ow_lo < Wo and w0 + ow_lo * stride < 0:
                        ow_lo += 1
                    ow_hi = Wo
                    while ow_hi > ow_lo and w0 + (ow_hi - 1) * stride >= W:
                        ow_hi -= 1
                    for n in range(N):
                        for oh in range(Ho):
                            h = oh * stride + i - pad
                            if h < 0 or h >= H:
                                continue
                            dst = &cols[row, (n * Ho + oh) * Wo]
                            src = &x[n, c, h, 0]
                            if stride == 1:
                                for ow in range(ow_lo, ow_hi):
                                    dst[ow] = src[w0 + ow]
                            else:
                                for ow in range(ow_lo, ow_hi):
                                    dst[ow] = src[w0 + ow * stride]
    return cols_arr


def col2im(real[:, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
           int kh, int kw, int stride, int pad):
    """Adjoint of :func:`im2col`; accumulates in kernel-offset order."""
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, oh, ow, row, base
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oh in range(Ho):
                            base = (n * Ho + oh) * Wo
                            for ow in range(Wo):
                                out[n, c, oh * stride + i, ow * stride + j] += cols[row, base + ow]
    if pad:
        return out_arr[:, :, pad:pad + H, pad:pad + W].copy()
    return out_arr
