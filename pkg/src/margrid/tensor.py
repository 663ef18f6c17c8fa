"""Dense fp64 tensors with reverse-mode automatic differentiation.

Everything downstream (the AR backbone, the diffusion head, the policy
objective) is built on the primitives in this module, so the contract here
is strict: float64 storage, row-major layout, deterministic forward and
backward passes, and no silent NaN/Inf propagation. Operations executed
while gradients are enabled are recorded on a tape; ``backward`` replays
the tape in reverse and accumulates gradients into leaf tensors.

Gradient semantics:
  * ``backward`` may be called repeatedly on the same tape; leaf gradients
    accumulate across calls. ``zero_grad`` or ``clear_tape`` resets state
    between optimization steps.
  * Gradients for broadcast operands are reduced back to the operand shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "DomainError",
    "NumericError",
    "no_grad",
    "clear_tape",
    "tape_size",
    "backward",
    "tensor",
    "constant",
    "parameter",
    "zeros",
    "ones",
    "full",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "matmul",
    "affine",
    "tsum",
    "tmean",
    "tmax",
    "tstd",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "take_rows",
    "minimum",
    "maximum",
    "clip",
    "softmax",
    "gelu",
    "tanh",
]


class TensorError(Exception):
    """Base class for tensor engine failures."""


class ShapeError(TensorError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(TensorError):
    """Input values fall outside the mathematical domain of the operation."""


class NumericError(TensorError):
    """An operation produced a non-finite value from finite inputs."""


_GRAD_ENABLED = True
_FINITE_CHECKS = True


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: "Tensor", inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class _Tape:
    def __init__(self):
        self.nodes: list[_Node] = []

    def clear(self):
        self.nodes.clear()


_TAPE = _Tape()


class no_grad(contextlib.ContextDecorator):
    """Disable gradient recording within the block (rollout and eval paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def clear_tape():
    """Drop all recorded operations. Call between optimization steps."""
    _TAPE.clear()


def tape_size() -> int:
    return len(_TAPE.nodes)


def _check_finite(data: np.ndarray, op: str):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self):
        backward(self)

    # Operator sugar. All arithmetic routes through the module-level ops so
    # that recording and shape checks live in one place.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable,
          check: bool = False) -> Tensor:
    # full-output finite scans cost real time at training sizes, so only ops
    # that can produce non-finite values from in-domain finite inputs ask
    # for one; everything else propagates and the training loops check the
    # scalars they log
    if check:
        _check_finite(data, op)
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        _TAPE.nodes.append(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    # a nonzero but subnormal denominator can still overflow to inf
    return _make("div", out, (a, b), back, check=True)


def minimum(a, b) -> Tensor:
    """Elementwise minimum. Ties route the gradient to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.minimum(a.data, b.data)
    take_a = a.data <= b.data

    def back(g):
        ga = np.where(take_a, g, 0.0)
        gb = np.where(take_a, 0.0, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("minimum", out, (a, b), back)


def maximum(a, b) -> Tensor:
    """Elementwise maximum. Ties route the gradient to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.maximum(a.data, b.data)
    take_a = a.data >= b.data

    def back(g):
        ga = np.where(take_a, g, 0.0)
        gb = np.where(take_a, 0.0, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("maximum", out, (a, b), back)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]. The gradient passes through inside the interval
    (boundaries included) and is zero outside."""
    if lo > hi:
        raise DomainError(f"clip bounds inverted: [{lo}, {hi}]")
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def back(g):
        return (np.where(inside, g, 0.0),)

    return _make("clip", out, (a,), back)


# ---------------------------------------------------------------------------
# elementwise unary


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        return (-g,)

    return _make("neg", -a.data, (a,), back)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def back(g):
        return (g * out,)

    return _make("exp", out, (a,), back, check=True)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    out = np.log(a.data)

    def back(g):
        return (g / a.data,)

    return _make("log", out, (a,), back)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def back(g):
        return (g / (2.0 * out),)

    return _make("sqrt", out, (a,), back)


def square(a) -> Tensor:
    a = _as_tensor(a)
    out = a.data * a.data

    def back(g):
        return (2.0 * g * a.data,)

    return _make("square", out, (a,), back)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))
    out = x * cdf

    def back(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return _make("gelu", out, (a,), back)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (a,), back)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a, b) -> Tensor:
    """Matrix product with optional broadcast batch dimensions.

    Both operands must have at least 2 dimensions; the trailing two axes
    are contracted as in the usual matrix product.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), back)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` as a single taped node.

    The dense layers sit on every hot path, so fusing the bias add into the
    matmul node halves their tape footprint. ``w`` must be 2-D and ``b``
    one bias per output column; ``x`` may carry any batch shape in front.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim < 2 or w.ndim != 2:
        raise ShapeError(f"affine needs matrices, got {x.shape} @ {w.shape}")
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine shapes do not line up: {x.shape} @ {w.shape} + {b.shape}")
    out = np.matmul(x.data, w.data)
    out += b.data

    def back(g):
        n_out = g.shape[-1]
        g2 = g.reshape(-1, n_out)
        gx = np.matmul(g, w.data.T)
        gw = np.matmul(x.data.reshape(-1, x.shape[-1]).T, g2)
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _make("affine", out, (x, w, b), back)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _check_nonempty(shape: tuple[int, ...], axes: tuple[int, ...], op: str):
    for ax in axes:
        if shape[ax] == 0:
            raise DomainError(f"{op} over empty axis {ax} of shape {shape}")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    _check_nonempty(a.shape, axes, "sum")
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), back)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    _check_nonempty(a.shape, axes, "mean")
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make("mean", np.asarray(out), (a,), back)


def tmax(a, axis: int) -> tuple[Tensor, np.ndarray]:
    """Maximum over one axis. Returns (values, argmax indices).

    The gradient flows to the first occurrence of the maximum along the
    reduced axis, matching the returned indices.
    """
    a = _as_tensor(a)
    ax = axis % a.ndim
    _check_nonempty(a.shape, (ax,), "max")
    idx = np.argmax(a.data, axis=ax)
    out = np.max(a.data, axis=ax)

    def back(g):
        ga = np.zeros_like(a.data)
        expanded = np.expand_dims(idx, ax)
        np.put_along_axis(ga, expanded, np.expand_dims(g, ax), axis=ax)
        return (ga,)

    return _make("max", out, (a,), back), idx


def tstd(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation (divide by N, not N-1).

    At points where the deviation is exactly zero the derivative is
    undefined; the backward pass returns zero there.
    """
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    _check_nonempty(a.shape, axes, "std")
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    mean = a.data.mean(axis=axes, keepdims=True)
    centered = a.data - mean
    out = np.sqrt((centered * centered).mean(axis=axes, keepdims=keepdims))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        sd = np.sqrt((centered * centered).mean(axis=axes, keepdims=True))
        safe = np.where(sd == 0.0, 1.0, sd)
        ga = np.where(sd == 0.0, 0.0, g * centered / (count * safe))
        return (ga,)

    return _make("std", np.asarray(out), (a,), back)


# ---------------------------------------------------------------------------
# structure


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), back)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for shape {a.shape}")
    out = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make("transpose", out, (a,), back)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()

    def back(g):
        return (_unbroadcast(g, a.shape),)

    return _make("broadcast_to", out, (a,), back)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis % out.ndim
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=ax) for i in range(len(parts))
        )

    return _make("concat", out, tuple(parts), back)


def take_rows(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along one axis by integer index.

    The backward pass scatter-adds, so repeated indices accumulate.
    """
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise ShapeError(f"take_rows index out of range for axis {ax} of shape {a.shape}")
    out = np.take(a.data, idx, axis=ax)

    def back(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (ga,)

    return _make("take_rows", out, (a,), back)


# ---------------------------------------------------------------------------
# fused nonlinearities


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis. Rows sum to one."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", out, (a,), back)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor):
    """Reverse-accumulate gradients of a scalar loss over the active tape.

    Intermediate gradients are kept per-pass; leaf tensors (those not
    produced by a recorded operation) accumulate into ``.grad`` so that
    repeated calls add up.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _TAPE.nodes:
        raise TensorError("backward called with an empty tape")

    produced = {id(node.out) for node in _TAPE.nodes}
    running: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(_TAPE.nodes):
        g = running.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if id(t) in produced:
                key = id(t)
                if key in running:
                    running[key] = running[key] + gt
                else:
                    running[key] = gt
            else:
                if t.grad is None:
                    t.grad = np.array(gt, dtype=np.float64)
                else:
                    t.grad = t.grad + gt
