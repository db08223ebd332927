"""Hot inner loops, compiled when available.

The Cython extension ``cptlab._kernels`` is used if it imports; otherwise the
numpy implementations below are used. Setting ``CPTLAB_PURE_PYTHON=1`` forces
the numpy path. Both paths return bit-identical arrays.

Reductions (``absmax``, ``maxval``) always go through numpy: its SIMD
reductions beat a scalar compiled loop, so there is nothing to gain there.
"""

import os

import numpy as np


def _np_absmax(x):
    return float(np.max(np.abs(x))) if x.size else 0.0


def _np_maxval(x):
    return float(np.max(x))


def _np_quantize_nearest(x, out, scale, peak, qmin, qmax):
    dt = x.dtype.type
    s = dt(scale)
    v = np.rint(x / s)
    res = v * s
    res = np.where(v >= dt(qmax), dt(peak) if qmax > 0 else dt(qmax) * s, res)
    res = np.where(v <= dt(qmin), -dt(peak) if qmin < 0 else dt(qmin) * s, res)
    out[...] = res


def _np_quantize_stochastic(x, u, out, scale, peak, qmax, snap):
    dt = x.dtype.type
    s = dt(scale)
    v = x / s
    r = np.rint(v)
    fl = np.floor(v)
    stoch = np.where(u < v - fl, fl + dt(1), fl)
    q = np.where(np.abs(v - r) <= dt(snap), r, stoch)
    res = q * s
    res = np.where(q >= dt(qmax), dt(peak), res)
    res = np.where(q <= -dt(qmax), -dt(peak), res)
    out[...] = res


def _np_im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, Ho, Wo, kh, kw) -> (C, kh, kw, N, Ho, Wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def _np_col2im(cols, n, c, h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    c6 = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += c6[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return out[:, :, pad:pad + h, pad:pad + w].copy()
    return out


_PURE = {
    "quantize_nearest": _np_quantize_nearest,
    "quantize_stochastic": _np_quantize_stochastic,
    "im2col": _np_im2col,
    "col2im": _np_col2im,
}


def _load_compiled():
    if os.environ.get("CPTLAB_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from cptlab import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
BACKEND = "cython" if _compiled is not None else "numpy"


def get_backend(name=None):
    """Return a namespace dict of kernels for ``name`` ('cython' or 'numpy')."""
    name = name or BACKEND
    if name == "numpy":
        return dict(_PURE)
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this build")
        return {k: getattr(_compiled, k) for k in _PURE}
    raise ValueError(f"unknown kernel backend {name!r}")


_active = get_backend()


def absmax(x):
    return _np_absmax(np.asarray(x))


def maxval(x):
    return _np_maxval(np.asarray(x))


def quantize_nearest(x, scale, peak, qmin, qmax):
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    _active["quantize_nearest"](flat, out, float(scale), float(peak), int(qmin), int(qmax))
    return out.reshape(x.shape)


def quantize_stochastic(x, u, scale, peak, qmax, snap):
    flat = np.ascontiguousarray(x).reshape(-1)
    uf = np.ascontiguousarray(u, dtype=flat.dtype).reshape(-1)
    out = np.empty_like(flat)
    snap = float(flat.dtype.type(snap))
    _active["quantize_stochastic"](flat, uf, out, float(scale), float(peak), int(qmax), snap)
    return out.reshape(x.shape)


def im2col(x, kh, kw, stride, pad):
    return _active["im2col"](np.ascontiguousarray(x), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    return _active["col2im"](np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad)
