"""Dense tensors with a linear reverse-mode tape.

Operations executed inside ``with Tape() as tape:`` are recorded in execution
order; ``tape.backward(loss)`` walks them once in reverse. Outside a tape, ops
compute values only (inference mode).
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from cptlab import kernels


class NonFiniteError(ValueError):
    """A tensor value or gradient became NaN or infinite."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None, check=True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if check and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def flat(self):
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable
    op: str


@dataclass
class Tape:
    """Ordered record of executed operations.

    A tape may be differentiated once. Call :meth:`reset` to reuse it.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def record(self, op, inputs, output, backward):
        if self.consumed:
            raise TapeError("tape already consumed by backward(); reset() before recording")
        self.nodes.append(Node(tuple(inputs), output, backward, op))

    def reset(self):
        self.nodes = []
        self.consumed = False

    def backward(self, loss: Tensor, seed=None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if self.consumed:
            raise TapeError("backward() called twice on the same tape without a new forward pass")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=loss.dtype)}
        produced = {id(n.output) for n in self.nodes}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {t.name or 'leaf tensor'}")
            g = g.reshape(t.shape).astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g


_tape_stack: list = []


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _result(op, data, inputs, backward):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor(data, check=False)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


# Public hook for ops defined outside this module (quantizers).
make_op = _result


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _result("matmul", A @ B, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature (2-D input) or per-channel (4-D input) bias."""
    if b.ndim != 1 or x.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    if x.ndim == 2:
        out = x.data + b.data
        red = (0,)
    else:
        out = x.data + b.data[None, :, None, None]
        red = (0, 2, 3)

    def backward(g):
        return g, g.sum(axis=red)

    return _result("add_bias", out, (x, b), backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(x.data.sum()), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result("relu", x.data * mask, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    n = shape[0]

    def backward(g):
        return (g.reshape(shape),)

    return _result("flatten", x.data.reshape(n, -1), (x,), backward)


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k mean pooling; trailing rows/cols that do not fill a window are dropped."""
    if x.ndim != 4:
        raise ValueError(f"avgpool2d expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ValueError(f"pool window {k} larger than input {h}x{w}")
    crop = x.data[:, :, : ho * k, : wo * k]
    out = crop.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))
    inv = 1.0 / (k * k)

    def backward(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3)
        gx[:, :, : ho * k, : wo * k] = up
        return (gx,)

    return _result("avgpool2d", out, (x,), backward)


def conv_output_size(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of N x C x H x W input with F x C x kH x kW filters."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: {x.shape} * {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = conv_output_size(h, wd, kh, kw, stride, padding)
    if ho < 1 or wo < 1 or stride < 1:
        raise ValueError(f"conv2d output would be {ho}x{wo} for input {h}x{wd}, kernel {kh}x{kw}")
    cols = kernels.im2col(x.data, kh, kw, stride, padding)  # (C*kh*kw, N*Ho*Wo)
    wm = w.data.reshape(f, -1)
    out = np.ascontiguousarray((wm @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
        gw = (gm @ cols.T).reshape(w.shape)
        gx = kernels.col2im(wm.T @ gm, x.shape, kh, kw, stride, padding) if x.requires_grad else None
        return gx, gw

    return _result("conv2d", out, (x, w), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    idx = np.arange(n)
    loss = np.asarray((logsum - z[idx, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[idx, labels] -= 1.0
        return (p * (g / n),)

    return _result("softmax_cross_entropy", loss, (logits,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def numerical_grad(f: Callable[[], float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``x.data`` (in place perturbation)."""
    g = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> list:
    """Relative error between tape gradients and finite differences, one per input.

    ``fn`` maps the input tensors to a scalar tensor.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)
    errs = []
    for t in inputs:
        num = numerical_grad(lambda: fn(*inputs).item(), t, eps)
        errs.append(relative_error(t.grad, num))
    return errs
