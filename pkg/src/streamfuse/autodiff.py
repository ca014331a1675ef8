"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a C-contiguous float64 numpy buffer plus a gradient slot.
Differentiable operations record themselves onto the active ``Tape`` (one node
per primitive, in execution order), and ``backward`` replays the tape in
reverse to accumulate gradients into every leaf that requires them.  Graphs
are rebuilt on every forward pass, so network topology is free to vary
between calls.

``finite_difference`` is the independent oracle used throughout the test
suite: it never touches the tape machinery.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    Data is held row-major and is treated as immutable after construction;
    only the ``grad`` slot is written later (by ``backward``).  Scalars are
    represented with shape ``(1,)``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError(f"tensor must have at least one element, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded primitive: output, operands, and a backward rule."""

    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Topological order is guaranteed by construction: a node is appended only
    after its operands exist.  Use as a context manager:

        with Tape() as tape:
            loss = ...
        backward(tape, loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.watched: dict[int, Tensor] = {}
        self.produced: set[int] = set()

    def _record(self, node: Node) -> None:
        for t in node.inputs:
            if t.requires_grad and id(t) not in self.produced:
                self.watched[id(t)] = t
        self.produced.add(id(node.out))
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.watched.clear()
        self.produced.clear()

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.stack.pop()


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _TapeState()


def active_tape() -> Optional[Tape]:
    return _STATE.stack[-1] if _STATE.stack else None


def record(out: Tensor, inputs: Sequence[Tensor], fn) -> Tensor:
    """Register a primitive on the active tape, if recording is on.

    ``fn(g, acc)`` receives the output gradient and must call
    ``acc(operand, grad_contribution)`` for every operand that needs one.
    Layer modules use this hook to define their own primitives.
    """
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._record(Node(out, tuple(inputs), fn))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Run the reverse pass and populate gradients of requires_grad leaves.

    Returns a map from each requires_grad leaf to its gradient tensor (the
    ``grad`` slot of the leaf is set to the same buffer).  The tape is reset
    afterwards.  ``loss`` must be a scalar of shape ``(1,)``.
    """
    if loss.shape != (1,):
        raise ShapeError(f"loss must be a scalar of shape (1,), got {list(loss.shape)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(1)}

    def acc(t: Tensor, g: np.ndarray) -> None:
        k = id(t)
        if k in grads:
            grads[k] = grads[k] + g
        else:
            grads[k] = g

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.fn(g, acc)

    out: dict[Tensor, Tensor] = {}
    for k, leaf in tape.watched.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = np.ascontiguousarray(g)
        out[leaf] = Tensor(leaf.grad)
    tape.reset()
    return out


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {list(a.shape)} vs {list(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def fn(g, acc):
        if a.requires_grad:
            acc(a, g)
        if b.requires_grad:
            acc(b, g)

    return record(out, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "sub")
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def fn(g, acc):
        if a.requires_grad:
            acc(a, g)
        if b.requires_grad:
            acc(b, -g)

    return record(out, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "mul")
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def fn(g, acc):
        if a.requires_grad:
            acc(a, g * b.data)
        if b.requires_grad:
            acc(b, g * a.data)

    return record(out, (a, b), fn)


def scale(a: Tensor, factor: float) -> Tensor:
    c = float(factor)
    out = Tensor(a.data * c, a.requires_grad)

    def fn(g, acc):
        acc(a, g * c)

    return record(out, (a,), fn)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, a.requires_grad)

    def fn(g, acc):
        acc(a, g * (1.0 - y * y))

    return record(out, (a,), fn)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)

    def fn(g, acc):
        acc(a, g * (a.data > 0.0))

    return record(out, (a,), fn)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "tanh": tanh, "relu": relu, "scale": scale}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name.

    Binary kinds (add/sub/mul) take a second tensor of identical shape;
    ``scale`` takes a python scalar; tanh/relu are unary.
    """
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {op_kind!r}")
    f = _ELEMENTWISE[op_kind]
    if op_kind in ("add", "sub", "mul"):
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return f(a, as_tensor(b))
    if op_kind == "scale":
        if b is None:
            raise ShapeError("scale needs a scalar factor")
        return f(a, float(b))
    return f(a)


def maximum_of(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise maximum over two or more same-shape tensors.

    On ties the earliest operand in the list receives the full gradient.
    """
    if len(tensors) < 2:
        raise ShapeError("maximum_of needs at least two operands")
    first = tensors[0]
    for t in tensors[1:]:
        _binary_check(first, t, "maximum_of")
    stacked = [t.data for t in tensors]
    y = stacked[0]
    for d in stacked[1:]:
        y = np.maximum(y, d)
    out = Tensor(y, any(t.requires_grad for t in tensors))

    def fn(g, acc):
        claimed = np.zeros(y.shape, dtype=bool)
        for t in tensors:
            hit = (t.data == y) & ~claimed
            if t.requires_grad:
                acc(t, g * hit)
            claimed |= hit

    return record(out, tuple(tensors), fn)


# ---------------------------------------------------------------------------
# Reductions, reshaping, linear algebra
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.array([a.data.sum()]), a.requires_grad)

    def fn(g, acc):
        acc(a, np.full(a.shape, g[0]))

    return record(out, (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one operand")
    datas = [t.data for t in tensors]
    ref = list(datas[0].shape)
    ax = axis % len(ref)
    for d in datas[1:]:
        s = list(d.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[list(d.shape) for d in datas]} on axis {ax}")
    out = Tensor(np.concatenate(datas, axis=ax), any(t.requires_grad for t in tensors))
    sizes = [d.shape[ax] for d in datas]

    def fn(g, acc):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(offset, offset + n)
                acc(t, np.ascontiguousarray(g[tuple(idx)]))
            offset += n

    return record(out, tuple(tensors), fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} x {list(b.shape)}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def fn(g, acc):
        if a.requires_grad:
            acc(a, g @ b.data.T)
        if b.requires_grad:
            acc(b, a.data.T @ g)

    return record(out, (a, b), fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {list(a.shape)}")
    out = Tensor(a.data.T.copy(), a.requires_grad)

    def fn(g, acc):
        acc(a, g.T.copy())

    return record(out, (a,), fn)


def matvec(w: Tensor, x: Tensor) -> Tensor:
    """Matrix-vector product ``w @ x`` with w of shape [m, n], x of shape [n]."""
    if w.data.ndim != 2 or x.data.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {list(w.shape)} x {list(x.shape)}")
    out = Tensor(w.data @ x.data, w.requires_grad or x.requires_grad)

    def fn(g, acc):
        if w.requires_grad:
            acc(w, np.outer(g, x.data))
        if x.requires_grad:
            acc(x, w.data.T @ g)

    return record(out, (w, x), fn)


def take(a: Tensor, index: int) -> Tensor:
    """Extract one entry of a vector as a scalar tensor."""
    if a.data.ndim != 1:
        raise ShapeError(f"take expects a vector, got shape {list(a.shape)}")
    i = int(index)
    if not 0 <= i < a.shape[0]:
        raise IndexError(f"take: index {i} out of range for length {a.shape[0]}")
    out = Tensor(np.array([a.data[i]]), a.requires_grad)

    def fn(g, acc):
        buf = np.zeros_like(a.data)
        buf[i] = g[0]
        acc(a, buf)

    return record(out, (a,), fn)


def take_row(a: Tensor, index: int) -> Tensor:
    """Extract row ``index`` of a matrix as a vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_row expects a matrix, got shape {list(a.shape)}")
    i = int(index)
    if not 0 <= i < a.shape[0]:
        raise IndexError(f"take_row: row {i} out of range for {a.shape[0]} rows")
    out = Tensor(a.data[i].copy(), a.requires_grad)

    def fn(g, acc):
        buf = np.zeros_like(a.data)
        buf[i] = g
        acc(a, buf)

    return record(out, (a,), fn)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack T vectors of identical length into a [T, d] matrix."""
    if not tensors:
        raise ShapeError("stack_rows needs at least one vector")
    for t in tensors:
        if t.data.ndim != 1 or t.shape != tensors[0].shape:
            raise ShapeError("stack_rows: operands must be vectors of identical length")
    out = Tensor(np.stack([t.data for t in tensors]), any(t.requires_grad for t in tensors))

    def fn(g, acc):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                acc(t, g[i].copy())

    return record(out, tuple(tensors), fn)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the rows of a [T, d] matrix, yielding a [d] vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got shape {list(a.shape)}")
    t = a.shape[0]
    out = Tensor(a.data.mean(axis=0), a.requires_grad)

    def fn(g, acc):
        acc(a, np.broadcast_to(g / t, a.shape).copy())

    return record(out, (a,), fn)


def axis_max(a: Tensor, axis: int) -> Tensor:
    """Max over one axis of a matrix; ties give gradient to the first index."""
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"axis_max expects a matrix and axis 0 or 1, got shape {list(a.shape)}")
    out = Tensor(a.data.max(axis=axis), a.requires_grad)
    arg = a.data.argmax(axis=axis)

    def fn(g, acc):
        buf = np.zeros_like(a.data)
        if axis == 0:
            buf[arg, np.arange(a.shape[1])] = g
        else:
            buf[np.arange(a.shape[0]), arg] = g
        acc(a, buf)

    return record(out, (a,), fn)


def softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got shape {list(a.shape)}")
    z = a.data - a.data.max()
    e = np.exp(z)
    y = e / e.sum()
    out = Tensor(y, a.requires_grad)

    def fn(g, acc):
        acc(a, y * (g - np.dot(g, y)))

    return record(out, (a,), fn)


def log_softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 1:
        raise ShapeError(f"log_softmax expects a vector, got shape {list(a.shape)}")
    z = a.data - a.data.max()
    lse = np.log(np.exp(z).sum())
    y = z - lse
    out = Tensor(y, a.requires_grad)

    def fn(g, acc):
        acc(a, g - np.exp(y) * g.sum())

    return record(out, (a,), fn)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a scalar function at x.

    Perturbs one coordinate at a time: (f(x + eps e_i) - f(x - eps e_i)) /
    (2 eps).  ``f`` must be deterministic; it is evaluated with no tape
    active, so this path is independent of the reverse-mode machinery.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate() -> float:
        r = f(x)
        return r.item() if isinstance(r, Tensor) else float(r)

    flat = x.data.reshape(-1)
    grad = np.zeros(x.data.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate()
        flat[i] = orig - eps
        fm = evaluate()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape))
