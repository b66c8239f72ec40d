"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Operations are pure functions of their inputs.  When a :class:`Tape` is active
and at least one input requires a gradient, the op appends a :class:`TapeNode`
holding the closure that maps the output gradient to input gradients.
``Tape.backward`` replays the nodes in reverse recording order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEBUG = os.environ.get("HRSS_DEBUG", "") not in ("", "0")


class TapeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# deterministic reductions


def tree_sum(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Pairwise (balanced tree) summation with a fixed association order.

    The result depends only on the extent of the reduced axes, never on how a
    caller might split the work, so it is a stable reference for regression
    comparisons.
    """
    a = np.asarray(a, dtype=np.float64)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)
    axes = tuple(sorted((ax % a.ndim for ax in axes), reverse=True)) if a.ndim else ()
    out = a
    for ax in axes:
        out = _tree_sum_axis(out, ax)
    if keepdims:
        for ax in sorted(axes):
            out = np.expand_dims(out, ax)
    return out


def _tree_sum_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    if n == 0:
        return np.zeros(a.shape[1:])
    while n > 1:
        half = n // 2
        paired = a[0 : 2 * half : 2] + a[1 : 2 * half : 2]
        a = np.concatenate([paired, a[2 * half :]], axis=0) if n % 2 else paired
        n = a.shape[0]
    return a[0].copy()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = list(range(lead))
    axes += [lead + i for i, s in enumerate(shape) if s == 1 and g.shape[lead + i] != 1]
    out = tree_sum(g, axis=tuple(axes)) if axes else g
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class TapeNode:
    """One recorded op: its inputs, its output and the gradient rule."""

    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int
    tape: "Tape" = field(repr=False)


class Tape:
    """Records differentiable ops issued inside its ``with`` block."""

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: "Tensor", grad: np.ndarray | None = None) -> dict["Tensor", np.ndarray]:
        return backward(self, loss, grad)


class no_grad:
    """Suspend recording on every active tape."""

    def __enter__(self):
        self._saved = Tape._stack[:]
        Tape._stack.clear()

    def __exit__(self, *exc):
        Tape._stack[:] = self._saved


def backward(tape: Tape, loss: "Tensor", grad: np.ndarray | None = None) -> dict["Tensor", np.ndarray]:
    """Reverse replay of ``tape`` from ``loss``.

    Returns a mapping from every leaf tensor that requires a gradient (and is
    reachable from ``loss``) to its gradient; the same arrays are stored on the
    leaves' ``.grad`` attribute.
    """
    if grad is None:
        if loss.size != 1:
            raise TapeError("backward without an explicit gradient needs a scalar loss")
        grad = np.ones(loss.shape)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64).reshape(loss.shape)}
    leaves: dict[int, Tensor] = {}
    if loss._node is None and loss.requires_grad:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            src = t._node
            if src is not None and src.tape is tape:
                if src.index >= node.index:
                    raise TapeError(f"cycle: {node.op}#{node.index} consumes output of {src.op}#{src.index}")
            else:
                leaves[id(t)] = t
            key = id(t)
            if gi.shape != t.shape:
                gi = _unbroadcast(gi, t.shape)
            grads[key] = grads[key] + gi if key in grads else gi

    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g
        out[t] = g
    return out


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """Row-major float64 array plus gradient bookkeeping.

    Layout conventions: images are NCHW, sequences are (B, L, C).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: TapeNode | None = None

    # -- introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- methods mirroring module-level ops
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def exp(self):
        return exp(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, rule: Callable) -> Tensor:
    """Wrap ``out`` in a Tensor and, if recording, attach a tape node."""
    if DEBUG and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    result = Tensor(out)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = TapeNode(op, tuple(inputs), result, rule, len(tape.nodes), tape)
        tape.nodes.append(node)
        result._node = node
    return result


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record("div", (a, b), ad / bd, lambda g: (g / bd, -g * ad / (bd * bd)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return record("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record("log", (x,), np.log(xd), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return record("square", (x,), xd * xd, lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = tree_sum(x.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(a % len(shape) for a in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (x,), out, rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record("permute", (x,), out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    out = np.array(x.data[idx], copy=True)

    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def rule(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return record("getitem", (x,), out, rule)


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; gradients scatter-add back."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape
    out = np.take(x.data, indices, axis=axis)

    def rule(g):
        full = np.zeros(shape)
        gm = np.moveaxis(g, axis, 0)
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, indices, gm)
        return (full,)

    return record("take", (x,), out, rule)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    axis = axis % xs[0].ndim
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=axis)

    def rule(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(int(lo), int(hi))
            parts.append(np.ascontiguousarray(g[tuple(sl)]))
        return parts

    return record("concat", xs, out, rule)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    axis = axis % (xs[0].ndim + 1)
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    axis = axis % x.ndim
    out, lo = [], 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(lo, lo + s)
        out.append(getitem(x, tuple(sl)))
        lo += s
    if lo != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis {axis} of extent {x.shape[axis]}")
    return out


# ---------------------------------------------------------------------------
# contraction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record("matmul", (a, b), ad @ bd, rule)
