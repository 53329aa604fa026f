"""Tape-based reverse-mode automatic differentiation on top of numpy.

Every differentiable operation appends a :class:`Node` to the active
:class:`Tape` when at least one input requires a gradient. :func:`backward`
walks the tape in reverse, accumulates gradients into leaf tensors and then
clears the tape.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count()


class NonFiniteGradientError(FloatingPointError):
    """Raised when backward produces a NaN or infinite gradient."""

    def __init__(self, node_id: int, op: str):
        super().__init__(f"non-finite gradient produced by node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.enabled = True

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()


def get_tape() -> Tape:
    return _tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; results never require grad inside the block."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


class Tensor:
    """An n-dimensional array with an optional gradient.

    Leaf tensors (created directly, not by an op) accumulate ``grad`` during
    :func:`backward` when ``requires_grad`` is set.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.is_leaf = True
        self.name = name

    # -- basic properties ------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce(self, "max", axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, inputs: Sequence[Tensor], fn, op: str) -> Tensor:
    needs = _tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.is_leaf = False
        _tape.record(Node(op, tuple(inputs), out, fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} cannot be broadcast") from None
    return a, b


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return g / b.data, -g * a.data / (b.data * b.data)

    return _make(out, (a, b), fn, "div")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(a, b, kind: str) -> Tensor:
    """Binary elementwise op with trailing-dimension broadcasting."""
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return op(a, b)


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),), "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``. ``cond`` is constant."""
    a, b = _coerce(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def fn(g):
        zero = np.zeros_like(g)
        return np.where(cond, g, zero), np.where(cond, zero, g)

    return _make(out, (a, b), fn, "where")


def stop_gradient(x: Tensor) -> Tensor:
    """Same values as ``x``; nothing flows back into ``x``'s history."""
    return Tensor(x.data, requires_grad=False)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


# -- shape ops -------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def fn(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# -- reductions ------------------------------------------------------------

def _check_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for tensor of rank {ndim}")
    return tuple(ax % ndim for ax in axes)


def _expand(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    elif axes is None and not keepdims:
        g = np.reshape(g, (1,) * len(shape))
    return np.broadcast_to(g, shape)


def reduce(x: Tensor, kind: str, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (all axes when ``None``).

    Max routes its gradient to the first maximal element in row-major order.
    """
    axes = _check_axis(axis, x.ndim)
    shape = x.shape
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (_expand(g, shape, axes, keepdims).copy(),), "sum")
    if kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        count = x.size if axes is None else int(np.prod([shape[a] for a in axes]))
        return _make(out, (x,), lambda g: (_expand(g, shape, axes, keepdims) / count,), "mean")
    if kind == "max":
        if axes is None:
            flat = np.argmax(x.data)
            mask = np.zeros(x.size, dtype=bool)
            mask[flat] = True
            mask = mask.reshape(shape)
        else:
            # row-major first argmax over several axes: move them to the end and flatten
            rest = [a for a in range(x.ndim) if a not in axes]
            moved = np.transpose(x.data, rest + list(axes))
            lead = moved.shape[: len(rest)]
            flat = moved.reshape(lead + (-1,))
            idx = np.argmax(flat, axis=-1)
            m = np.zeros(flat.shape, dtype=bool)
            np.put_along_axis(m, idx[..., None], True, axis=-1)
            m = m.reshape(moved.shape)
            mask = np.transpose(m, np.argsort(rest + list(axes)))
        out = x.data.max(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (np.where(mask, _expand(g, shape, axes, keepdims), 0.0),), "max")
    raise ValueError(f"unknown reduction {kind!r}")


# -- backward --------------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every leaf that requires it, then clear the tape."""
    tape = tape or _tape
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        tape.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for parent, pg in zip(node.inputs, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg, dtype=parent.dtype), parent.shape)
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteGradientError(node.output.node_id, node.op)
                if parent.is_leaf:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
    finally:
        tape.clear()
