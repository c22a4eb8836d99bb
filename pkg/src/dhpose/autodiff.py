"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records every operation as it is built, so the node list is
topologically ordered by construction.  ``backward`` walks that list in
reverse and accumulates exact gradients, summing over fan-out.  All values
are float64 and every op is deterministic, so identical inputs give
bitwise-identical forward and backward results.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A node in the computation graph: cached values plus backward hooks."""

    __slots__ = ("values", "grad", "parents", "op", "tape", "requires_grad", "_bwd")

    def __init__(self, values, tape, parents=(), op="leaf", requires_grad=False, bwd=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.op = op
        self.tape = tape
        self.requires_grad = requires_grad
        self._bwd = bwd

    @property
    def shape(self):
        return self.values.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    # Operator sugar; every overload routes through the module-level ops so
    # recording happens in exactly one place.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.values.shape})"


class Tape:
    """Ordered op record; create leaves with :meth:`var` / :meth:`const`."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _record(self, t: Tensor) -> Tensor:
        self.nodes.append(t)
        return t

    def var(self, values, name="var") -> Tensor:
        """A differentiable leaf (parameter or input we want gradients for)."""
        return self._record(Tensor(values, self, op=name, requires_grad=True))

    def const(self, values) -> Tensor:
        """A non-differentiable leaf."""
        return self._record(Tensor(values, self, op="const"))


def backward(tape: Tape, out: Tensor) -> None:
    """Populate ``.grad`` on every node ``out`` depends on.

    ``out`` must be scalar (size one).  Gradients accumulate over fan-out in
    fixed reverse-recording order.
    """
    if out.values.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {out.values.shape}")
    if out.tape is not tape:
        raise ValueError("output tensor does not belong to this tape")
    out.grad = np.ones_like(out.values)
    seen = False
    for node in reversed(tape.nodes):
        if node is out:
            seen = True
        if not seen or node.grad is None or node._bwd is None:
            continue
        node._bwd(node.grad)


def _wrap(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.const(np.asarray(x, dtype=np.float64))


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(op, values, parents, bwd, requires_grad=None):
    tape = parents[0].tape
    if requires_grad is None:
        requires_grad = any(p.requires_grad for p in parents)
    t = Tensor(values, tape, parents=parents, op=op,
               requires_grad=requires_grad, bwd=bwd if requires_grad else None)
    return tape._record(t)


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    out_values = a.values + b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.values.shape))

    return _make("add", out_values, (a, b), bwd)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    out_values = a.values - b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.values.shape))

    return _make("sub", out_values, (a, b), bwd)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    out_values = a.values * b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.values, a.values.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.values, b.values.shape))

    return _make("mul", out_values, (a, b), bwd)


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    out_values = a.values / b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.values, a.values.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))

    return _make("div", out_values, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(-g)

    return _make("neg", -a.values, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product; 2D or batched with identical leading dims."""
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {a.values.shape} and {b.values.shape}")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.values.shape} vs {b.values.shape}")
    if a.values.ndim > 2 and b.values.ndim > 2 and a.values.shape[:-2] != b.values.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.values.shape} vs {b.values.shape}")
    out_values = a.values @ b.values

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.values, -1, -2)
            a.accumulate(_unbroadcast(ga, a.values.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.values, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.values.shape))

    return _make("matmul", out_values, (a, b), bwd)


def cos(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(-g * np.sin(a.values))

    return _make("cos", np.cos(a.values), (a,), bwd)


def sin(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * np.cos(a.values))

    return _make("sin", np.sin(a.values), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_values = np.tanh(a.values)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - out_values * out_values))

    return _make("tanh", out_values, (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = np.where(a.values >= 0.0, 1.0, slope)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * mask)

    return _make("leaky_relu", a.values * mask, (a,), bwd)


def square(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * 2.0 * a.values)

    return _make("square", a.values * a.values, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; the subgradient at 0 is taken as 0."""
    out_values = np.sqrt(a.values)

    def bwd(g):
        if a.requires_grad:
            safe = np.where(out_values > 0.0, out_values, 1.0)
            a.accumulate(np.where(out_values > 0.0, g * 0.5 / safe, 0.0))

    return _make("sqrt", out_values, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.values >= lo) & (a.values <= hi)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * inside)

    return _make("clamp", np.clip(a.values, lo, hi), (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.values.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.values.shape).copy())

    return _make("sum", out_values, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.values.size if axis is None else a.values.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.values.shape))

    return _make("reshape", a.values.reshape(shape), (a,), bwd)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.swapaxes(g, ax1, ax2))

    return _make("swapaxes", np.swapaxes(a.values, ax1, ax2), (a,), bwd)


def transpose2d(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose2d needs a 2D tensor, got {a.values.shape}")
    return swapaxes(a, 0, 1)


def getitem(a: Tensor, key) -> Tensor:
    out_values = a.values[key]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            np.add.at(full, key, g)
            a.accumulate(full)

    return _make("getitem", out_values, (a,), bwd)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis`` (scatter-add on the way back)."""
    indices = np.asarray(indices)
    out_values = np.take(a.values, indices, axis=axis)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            key = (slice(None),) * axis + (indices,)
            np.add.at(full, key, g)
            a.accumulate(full)

    return _make("take", out_values, (a,), bwd)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    tape = _tape_of(*xs)
    xs = [_wrap(x, tape) for x in xs]
    out_values = np.concatenate([x.values for x in xs], axis=axis)
    sizes = [x.values.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        g = np.moveaxis(g, axis, 0)
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires_grad:
                x.accumulate(np.moveaxis(g[lo:hi], 0, axis))

    return _make("concat", out_values, tuple(xs), bwd)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    shaped = []
    for x in xs:
        shp = list(x.values.shape)
        shp.insert(axis if axis >= 0 else len(shp) + 1 + axis, 1)
        shaped.append(reshape(x, tuple(shp)))
    return concat(shaped, axis=axis)
