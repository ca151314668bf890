"""Dense float64 tensors with a minimal reverse-mode gradient tape.

Every op in this module is a plain function over :class:`RealTensor`.
When at least one input requires a gradient and a :class:`GradientTape`
is active, the op appends a node holding its vector-Jacobian product to
that tape.  :func:`backward` replays the nodes in reverse order.

Broadcasting follows numpy semantics; gradients are summed back to the
input shape.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "DimensionError",
    "NumericError",
    "ContractError",
    "RealTensor",
    "GradientTape",
    "tensor",
    "constant",
    "backward",
    "finite_difference",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "sum",
    "mean",
    "row_norm",
    "power",
    "absolute",
    "gelu",
    "softplus",
    "exp",
    "log_softmax",
    "inv_sqrt",
    "reshape",
    "concat",
    "take_rows",
    "pick",
]

KINK_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A NaN or infinite value was produced or supplied."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


_ids = itertools.count()


class RealTensor:
    """Immutable float64 array plus an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values; copied and converted to float64.  Scalars become shape (1,).
    requires_grad : bool
        Whether the tensor is a differentiable leaf (or an op output
        recorded on a tape).
    """

    __slots__ = ("data", "requires_grad", "grad", "id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor values must be finite")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"RealTensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> RealTensor:
    return RealTensor(data, requires_grad=requires_grad)


def constant(data) -> RealTensor:
    return RealTensor(data, requires_grad=False)


def _as_tensor(x) -> RealTensor:
    return x if isinstance(x, RealTensor) else RealTensor(x)


@dataclass
class _Node:
    kind: str
    inputs: tuple[RealTensor, ...]
    output: RealTensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_local = threading.local()


def _active_tape() -> GradientTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class GradientTape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients are recorded.  Tapes are thread-local.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> GradientTape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: RealTensor, wrt: Sequence[RealTensor] = ()):
        return backward(self, loss, wrt)


def _record(kind, inputs, out_data, vjp) -> RealTensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = RealTensor(out_data, requires_grad=track)
    if track:
        tape.nodes.append(_Node(kind, tuple(inputs), out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: RealTensor, b: RealTensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


def backward(tape: GradientTape, loss: RealTensor, wrt: Sequence[RealTensor] = ()):
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a dict mapping tensor id to its gradient tensor for every leaf
    reached by the sweep and for every tensor in ``wrt`` (zeros if the
    loss does not depend on it).  Gradients are also accumulated into the
    ``grad`` slot of requires-grad leaves.
    """
    if loss.shape != (1,):
        raise ContractError(f"loss must have shape (1,), got {loss.shape}")
    if not tape.nodes or not loss.requires_grad:
        raise ContractError("loss has no recorded history on this tape")
    produced = {node.output.id for node in tape.nodes}
    if loss.id not in produced:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones(1)}
    leaves: dict[int, RealTensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(node.output.id, None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.vjp(g_out)):
            if g is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + g
            else:
                grads[inp.id] = g
            if inp.id not in produced:
                leaves[inp.id] = inp

    result: dict[int, RealTensor] = {}
    for tid, leaf in leaves.items():
        g = grads[tid]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[tid] = RealTensor(g)
    for t in wrt:
        if t.id not in result:
            result[t.id] = RealTensor(np.zeros_like(t.data))
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    return result


def finite_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x.data if isinstance(x, RealTensor) else x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> RealTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> RealTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> RealTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _record(
        "mul", (a, b), ad * bd,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: RealTensor, c: float) -> RealTensor:
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("scale factor must be finite")
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def neg(a: RealTensor) -> RealTensor:
    return scale(a, -1.0)


def matmul(a: RealTensor, b: RealTensor) -> RealTensor:
    """Matrix product of 2-D operands."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum(a: RealTensor, axis: int | None = None) -> RealTensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _record("sum", (a,), np.array([a.data.sum()]),
                       lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))
    ax = _norm_axis(axis, a.data.ndim)
    return _record("sum", (a,), a.data.sum(axis=ax),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a: RealTensor, axis: int | None = None) -> RealTensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def row_norm(d: RealTensor) -> RealTensor:
    """Euclidean norm over the last axis, ‖u − v‖₂ when fed a difference.

    The subgradient at the origin is taken as zero.
    """
    dd = d.data
    n = np.sqrt(np.einsum("...k,...k->...", dd, dd))

    def vjp(g):
        safe = np.where(n < KINK_EPS, 1.0, n)
        unit = np.where((n < KINK_EPS)[..., None], 0.0, dd / safe[..., None])
        return (g[..., None] * unit,)

    return _record("row_norm", (d,), n, vjp)


def power(a: RealTensor, beta: float) -> RealTensor:
    """|t|^β elementwise; derivative taken as zero where |t| < 1e-12."""
    beta = float(beta)
    if not beta > 0:
        raise ContractError(f"power exponent must be positive, got {beta}")
    ad = a.data
    mag = np.abs(ad)
    out = mag ** beta

    def vjp(g):
        kink = mag < KINK_EPS
        safe = np.where(kink, 1.0, mag)
        d = np.where(kink, 0.0, beta * safe ** (beta - 1.0) * np.sign(ad))
        return (g * d,)

    return _record("power", (a,), out, vjp)


def absolute(a: RealTensor) -> RealTensor:
    ad = a.data
    return _record("abs", (a,), np.abs(ad), lambda g: (g * np.sign(ad),))


def exp(a: RealTensor) -> RealTensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def inv_sqrt(a: RealTensor) -> RealTensor:
    """Elementwise t^(-1/2) for strictly positive t."""
    ad = a.data
    if np.any(ad <= 0):
        raise ContractError("inv_sqrt requires positive input")
    out = ad ** -0.5
    return _record("inv_sqrt", (a,), out, lambda g: (g * -0.5 * out / ad,))


# ---------------------------------------------------------------------------
# activations

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: RealTensor) -> RealTensor:
    """Exact GELU, x·Φ(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _record("gelu", (a,), x * cdf, lambda g: (g * (cdf + x * pdf),))


def softplus(a: RealTensor) -> RealTensor:
    x = a.data
    return _record("softplus", (a,), np.logaddexp(0.0, x), lambda g: (g * expit(x),))


def log_softmax(a: RealTensor) -> RealTensor:
    """Log-softmax over the last axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _record("log_softmax", (a,), out,
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: RealTensor, shape: Sequence[int]) -> RealTensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(parts: Sequence[RealTensor], axis: int = 0) -> RealTensor:
    parts = tuple(parts)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _record("concat", parts, out,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(a: RealTensor, index) -> RealTensor:
    """Select entries along axis 0 by integer index array."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take_rows", (a,), a.data[idx], vjp)


def pick(a: RealTensor, cols) -> RealTensor:
    """Row-wise gather of one column per row of a 2-D tensor."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.shape[0])
    if a.data.ndim != 2 or cols.shape != (a.shape[0],):
        raise DimensionError("pick expects a 2-D tensor and one column per row")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _record("pick", (a,), a.data[rows, cols], vjp)
