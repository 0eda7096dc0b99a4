"""Minimal reverse-mode autodiff over dense numpy arrays.

Every differentiable operation builds a node holding its parents and a
closure mapping the upstream gradient to per-parent gradients.  Operations
that multiply-accumulate report their cost to the active :class:`OpCounter`.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from collections import defaultdict
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "OpCounter",
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "ConfigError",
    "tensor",
    "precision",
    "default_dtype",
    "no_grad",
    "count_macs",
    "scope",
    "record_macs",
    "make_node",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "square",
    "sqrt",
    "exp",
    "abs",
    "reciprocal",
    "broadcast_add",
    "broadcast_mul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "matmul",
    "softmax",
    "gelu",
    "linear_map",
    "stack",
]


_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
        _state.counters = []
        _state.scopes = []
        _state.check_finite = True
    return _state


def default_dtype():
    return _st().dtype


@contextlib.contextmanager
def precision(dtype):
    """Set the dtype used for tensors created from Python data or constants."""
    st = _st()
    prev = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    st = _st()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    st = _st()
    prev = st.check_finite
    st.check_finite = enabled
    try:
        yield
    finally:
        st.check_finite = prev


class OpCounter:
    """Exact multiply-accumulate tally, keyed by ``"<scope>:<op>"`` labels."""

    def __init__(self):
        self.per_op_breakdown: dict[str, int] = defaultdict(int)

    @property
    def mac_count(self) -> int:
        return int(builtins.sum(self.per_op_breakdown.values()))

    def add(self, label: str, n: int) -> None:
        self.per_op_breakdown[label] += int(n)

    def by_scope(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for label, n in self.per_op_breakdown.items():
            out[label.rsplit(":", 1)[0]] += n
        return dict(out)

    def by_op(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for label, n in self.per_op_breakdown.items():
            out[label.rsplit(":", 1)[1]] += n
        return dict(out)

    def total(self, prefix: str = "", op: Optional[str] = None) -> int:
        n = 0
        for label, c in self.per_op_breakdown.items():
            sc, name = label.rsplit(":", 1)
            if sc.startswith(prefix) and (op is None or name == op):
                n += c
        return n


@contextlib.contextmanager
def count_macs() -> Iterator[OpCounter]:
    counter = OpCounter()
    st = _st()
    st.counters.append(counter)
    try:
        yield counter
    finally:
        st.counters.remove(counter)


@contextlib.contextmanager
def scope(name: str):
    """Push a name onto the label prefix used for MAC records."""
    st = _st()
    st.scopes.append(name)
    try:
        yield
    finally:
        st.scopes.pop()


def current_scope() -> str:
    return ".".join(s for s in _st().scopes if s)


def record_macs(op: str, n: int) -> None:
    st = _st()
    if not st.counters:
        return
    label = f"{current_scope()}:{op}"
    for c in st.counters:
        c.add(label, n)


class Tensor:
    """Dense array with an optional gradient and a recorded history."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topo(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or default_dtype()), requires_grad=requires_grad)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward`` maps the upstream gradient to a tuple with one entry per
    parent (``None`` for parents that need no gradient).
    """
    st = _st()
    if st.check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values (scope {current_scope() or '<root>'})")
    out = Tensor(data)
    out.op = op
    if st.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return make_node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return make_node(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ContractError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return make_node(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def _check_broadcast(a: Tensor, b: Tensor, axes: Iterable[int], op: str) -> tuple[int, ...]:
    axes = tuple(sorted(ax % a.ndim for ax in axes))
    if b.ndim != a.ndim:
        raise DimensionError(f"{op}: rank {b.ndim} operand against rank {a.ndim}")
    for i, (ea, eb) in enumerate(zip(a.shape, b.shape)):
        if i in axes:
            if eb != 1:
                raise DimensionError(f"{op}: axis {i} marked for broadcast but has extent {eb}")
        elif ea != eb:
            raise DimensionError(f"{op}: axis {i} extents {ea} and {eb} differ")
    return axes


def broadcast_add(a: Tensor, b: Tensor, axes: Iterable[int]) -> Tensor:
    """``a + b`` where ``b`` is singleton along exactly the named ``axes``."""
    axes = _check_broadcast(a, b, axes, "broadcast_add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes, keepdims=True)), "broadcast_add")


def broadcast_mul(a: Tensor, b: Tensor, axes: Iterable[int]) -> Tensor:
    axes = _check_broadcast(a, b, axes, "broadcast_mul")
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (g * b.data, (g * a.data).sum(axis=axes, keepdims=True)),
        "broadcast_mul",
    )


# reductions and layout -----------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return make_node(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axs = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axs]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    inv = np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in items], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return make_node(out, tuple(items), backward, "stack")


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, label: str = "matmul") -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents {a.shape[:-2]} and {b.shape[:-2]} differ")
    m, k = a.shape[-2:]
    k2, n = b.shape[-2:]
    if k != k2:
        raise DimensionError(f"matmul: inner extents {k} and {k2} differ")
    batch = int(np.prod(a.shape[:-2], dtype=np.int64))
    record_macs(label, batch * m * k * n)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, label)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _SQRT_HALF))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_node(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


def linear_map(x: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a fixed ``(L_out, L_in)`` matrix along one axis.

    Used for resampling and separable filtering; these are not counted as MACs.
    """
    axis %= x.ndim
    if matrix.shape[1] != x.shape[axis]:
        raise DimensionError(f"linear_map: matrix takes {matrix.shape[1]} inputs, axis {axis} has {x.shape[axis]}")
    m = matrix.astype(x.dtype, copy=False)
    moved = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(moved @ m.T, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1) @ m
        return (np.moveaxis(gm, -1, axis),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "linear_map")
