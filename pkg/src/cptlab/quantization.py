"""Uniform per-tensor fake quantizers and their straight-through backward rules.

All quantizers simulate low precision on top of float arithmetic. ``bits=32``
is a pass-through everywhere. Nearest rounding is round-half-to-even.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np

from cptlab import kernels
from cptlab.autodiff import NonFiniteError, Tensor, make_op
from cptlab.schedule import PrecisionSchedule

TENSOR_CLASSES = ("weight", "activation", "error", "gradient")
QUANTIZER_KINDS = ("max_scale_symmetric", "max_scale_unsigned", "dorefa_style")
ROUNDING_MODES = ("nearest_even", "stochastic")
FULL_PRECISION = 32


def _check_bits(bits):
    if int(bits) != bits or not 2 <= bits <= FULL_PRECISION:
        raise ValueError(f"bitwidth must be an integer in [2, 32], got {bits}")
    return int(bits)


def _check_finite(x):
    if not np.isfinite(x).all():
        raise NonFiniteError("quantizer received non-finite input")


def _snap(dtype, qmax):
    # values within a few ulps of a grid point are treated as on the grid
    return 4.0 * float(np.finfo(dtype).eps) * max(qmax, 1)


def signed_levels(bits):
    return 2 ** (bits - 1) - 1


def unsigned_levels(bits):
    return 2 ** bits - 1


def quantize_max_scale(x, bits, signed=True, rounding="nearest_even", rng=None):
    """Quantize ``x`` onto a uniform grid scaled by its own maximum.

    Signed: levels ``k * s`` with ``|k| <= 2**(bits-1) - 1`` and
    ``s = max|x| / (2**(bits-1) - 1)``. Unsigned: negatives are clamped to 0
    and levels are ``k * s`` with ``0 <= k <= 2**bits - 1``, ``s = max(x) / (2**bits - 1)``.
    The extreme level reproduces the observed maximum exactly, which makes the
    quantizer idempotent. A tensor whose step size would be subnormal in its own
    dtype (all values within ~1e-36 of zero for float32) is returned unquantized,
    since no usable grid exists at that magnitude.
    """
    x = np.asarray(x)
    bits = _check_bits(bits)
    _check_finite(x)
    if bits == FULL_PRECISION or x.size == 0:
        return x.copy()
    if rounding not in ROUNDING_MODES:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    if signed:
        qmax, qmin = signed_levels(bits), -signed_levels(bits)
        peak = kernels.absmax(x)
    else:
        qmax, qmin = unsigned_levels(bits), 0
        peak = max(kernels.maxval(x), 0.0)
    scale = peak / qmax
    if peak == 0.0 or scale < np.finfo(x.dtype if x.dtype.kind == "f" else np.float64).tiny:
        return x.copy() if signed else np.maximum(x, 0)
    if rounding == "nearest_even":
        return kernels.quantize_nearest(x, scale, peak, qmin, qmax)
    if rng is None:
        raise ValueError("stochastic rounding needs a random generator")
    src = x if signed else np.maximum(x, 0)
    u = rng.random(x.shape, dtype=x.dtype if x.dtype in (np.float32, np.float64) else np.float64)
    return kernels.quantize_stochastic(src, u, scale, peak, qmax, _snap(x.dtype, qmax))


def quantize_gradient_stochastic(g, bits, rng):
    """Signed max-scale grid with unbiased stochastic rounding (errors and gradients)."""
    return quantize_max_scale(g, bits, signed=True, rounding="stochastic", rng=rng)


def quantize_dorefa_style(w, bits):
    """tanh-normalize ``w`` to [0, 1], quantize to ``2**bits - 1`` steps, map back to [-1, 1].

    At 32 bits only the normalization ``tanh(w) / max|tanh(w)|`` is applied.
    An all-zero input normalizes to 0 (the midpoint of the [0, 1] grid).
    """
    w = np.asarray(w)
    bits = _check_bits(bits)
    _check_finite(w)
    t = np.tanh(w)
    m = float(np.max(np.abs(t))) if t.size else 0.0
    norm = t / m if m > 0 else np.zeros_like(t)
    if bits == FULL_PRECISION:
        return norm
    n = unsigned_levels(bits)
    unit = norm / 2 + 0.5
    q = np.rint(unit * n) / n
    return 2 * q - 1


def ste_backward(upstream, x, clip_range):
    """Straight-through gradient: pass ``upstream`` where ``lo <= x <= hi``, zero elsewhere."""
    upstream = np.asarray(upstream)
    x = np.asarray(x)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream {upstream.shape} and input {x.shape} differ")
    lo, hi = clip_range
    return np.where((x >= lo) & (x <= hi), upstream, 0).astype(upstream.dtype, copy=False)


def fake_quantize(x: Tensor, bits, kind="max_scale_symmetric", rounding="nearest_even", rng=None) -> Tensor:
    """Differentiable forward quantization with a straight-through backward."""
    bits = _check_bits(bits)
    if bits == FULL_PRECISION and kind != "dorefa_style":
        return x
    data = x.data
    if kind == "max_scale_symmetric":
        out = quantize_max_scale(data, bits, signed=True, rounding=rounding, rng=rng)
        peak = kernels.absmax(data)

        def backward(g):
            return (ste_backward(g, data, (-peak, peak)),)
    elif kind == "max_scale_unsigned":
        out = quantize_max_scale(data, bits, signed=False, rounding=rounding, rng=rng)
        peak = max(kernels.maxval(data), 0.0)

        def backward(g):
            return (ste_backward(g, data, (0.0, peak)),)
    elif kind == "dorefa_style":
        out = quantize_dorefa_style(data, bits)
        t = np.tanh(data)
        m = float(np.max(np.abs(t)))
        deriv = (1 - t * t) / m if m > 0 else np.zeros_like(t)

        def backward(g):
            return (g * deriv,)
    else:
        raise ValueError(f"unknown quantizer kind {kind!r}")
    return make_op(f"quant[{kind},{bits}]", out.astype(data.dtype, copy=False), (x,), backward)


def quantize_errors(x: Tensor, bits, rng, rounding="stochastic") -> Tensor:
    """Identity forward; quantizes the error (gradient w.r.t. ``x``) flowing back."""
    bits = _check_bits(bits)
    if bits == FULL_PRECISION:
        return x

    def backward(g):
        return (quantize_max_scale(g, bits, signed=True, rounding=rounding, rng=rng),)

    return make_op(f"error_quant[{bits}]", x.data, (x,), backward)


@dataclass(frozen=True)
class QuantSpec:
    """How one class of tensors is quantized.

    ``bits_source`` is a static bitwidth or a :class:`PrecisionSchedule`.
    Error and gradient tensors may follow a schedule only with
    ``allow_scheduled_backward`` (the gradient-precision ablation).
    """

    tensor_class: str
    bits_source: Union[int, PrecisionSchedule]
    quantizer_kind: str = "max_scale_symmetric"
    rounding: str = "nearest_even"
    allow_scheduled_backward: bool = False

    def __post_init__(self):
        if self.tensor_class not in TENSOR_CLASSES:
            raise ValueError(f"unknown tensor class {self.tensor_class!r}")
        if self.quantizer_kind not in QUANTIZER_KINDS:
            raise ValueError(f"unknown quantizer kind {self.quantizer_kind!r}")
        if self.rounding not in ROUNDING_MODES:
            raise ValueError(f"unknown rounding mode {self.rounding!r}")
        if isinstance(self.bits_source, PrecisionSchedule):
            if self.tensor_class in ("error", "gradient") and not self.allow_scheduled_backward:
                raise ValueError(
                    f"{self.tensor_class} tensors use static bits unless gradient-precision cycling is enabled")
        else:
            _check_bits(self.bits_source)

    def bits(self, epoch=0):
        if isinstance(self.bits_source, PrecisionSchedule):
            return self.bits_source.bits_at(epoch)
        return int(self.bits_source)
