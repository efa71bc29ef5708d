"""Reverse-mode automatic differentiation on an append-only tape.

Nodes hold whole numpy arrays, so one node covers e.g. a full layer of an MLP
evaluated on every day of every training season. Each node records its
operand indices and a vector-Jacobian product closure; ``Tape.backward``
sweeps the tape once in reverse.

Example
-------
>>> tape = Tape()
>>> a, b = tape.leaf(3.0), tape.leaf(4.0)
>>> grads = tape.backward(a * b)
>>> float(grads[a]), float(grads[b])
(4.0, 3.0)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# Logistic inputs are clipped here; exp(700) is still finite in float64.
_LOGISTIC_CLIP = 700.0


class NonFiniteError(FloatingPointError):
    """A primitive produced a non-finite value."""


class _Node:
    __slots__ = ("kind", "value", "parents", "vjp", "requires_grad")

    def __init__(self, kind, value, parents, vjp, requires_grad):
        self.kind = kind
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100.0

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    @property
    def kind(self) -> str:
        return self.tape.nodes[self.index].kind

    def __repr__(self):
        return f"Var(#{self.index} {self.kind} shape={self.shape})"

    def __hash__(self):
        return hash((id(self.tape), self.index))

    def __eq__(self, other):
        return isinstance(other, Var) and other.tape is self.tape and other.index == self.index

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Var) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(other) if isinstance(other, Var) else 1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Gradients(dict):
    """Gradient of the output for every leaf, keyed by leaf :class:`Var`."""


class Tape:
    """Append-only list of primitive operation nodes."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, value, parents=(), vjp=None, requires_grad=None) -> Var:
        if requires_grad is None:
            requires_grad = any(self.nodes[p].requires_grad for p in parents)
        self.nodes.append(_Node(kind, value, tuple(parents), vjp, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> Var:
        """A differentiable input (parameter)."""
        return self._push("leaf", np.array(value, dtype=float), requires_grad=True)

    def const(self, value) -> Var:
        return self._push("const", np.asarray(value, dtype=float), requires_grad=False)

    def leaves(self) -> list[Var]:
        return [Var(self, i) for i, n in enumerate(self.nodes) if n.kind == "leaf"]

    def backward(self, output: Var) -> Gradients:
        """Gradient of scalar ``output`` w.r.t. every leaf, in one reverse sweep."""
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        out_value = self.nodes[output.index].value
        if np.size(out_value) != 1:
            raise ValueError(f"backward needs a scalar output, got shape {np.shape(out_value)}")
        grads: list = [None] * (output.index + 1)
        grads[output.index] = np.ones_like(out_value)
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if not node.parents:
                continue
            needs = tuple(self.nodes[p].requires_grad for p in node.parents)
            if not any(needs):
                continue
            parent_grads = node.vjp(g, needs)
            for p, need, pg in zip(node.parents, needs, parent_grads):
                if not need:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
        result = Gradients()
        for i, node in enumerate(self.nodes[: output.index + 1]):
            if node.kind == "leaf":
                g = grads[i]
                result[Var(self, i)] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=float).reshape(node.value.shape)
        return result


def backward(tape: Tape, output: Var) -> Gradients:
    return tape.backward(output)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if np.shape(g) == shape:
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(kind: str, value, operand) -> None:
    if not np.all(np.isfinite(value)):
        bad = np.asarray(operand).ravel()
        mask = ~np.isfinite(np.asarray(value).ravel())
        sample = bad[np.argmax(mask)] if bad.size == mask.size else bad[:1]
        raise NonFiniteError(f"{kind} produced a non-finite value (operand {sample!r})")


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return tape._push("add", a.value + b.value, (a.index, b.index), vjp)


def neg(a) -> Var:
    tape = _tape_of(a)
    return tape._push("neg", -a.value, (a.index,), lambda g, needs: (-g,))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (_unbroadcast(g * bv, np.shape(av)) if needs[0] else None,
                _unbroadcast(g * av, np.shape(bv)) if needs[1] else None)

    return tape._push("mul", av * bv, (a.index, b.index), vjp)


def reciprocal(a) -> Var:
    tape = _tape_of(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 1.0 / av
    _check_finite("reciprocal", out, av)
    return tape._push("reciprocal", out, (a.index,), lambda g, needs: (-g * out * out,))


def exp(a) -> Var:
    tape = _tape_of(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    _check_finite("exp", out, a.value)
    return tape._push("exp", out, (a.index,), lambda g, needs: (g * out,))


def log(a) -> Var:
    tape = _tape_of(a)
    av = a.value
    if np.any(av <= 0) or not np.all(np.isfinite(av)):
        bad = np.asarray(av).ravel()
        raise NonFiniteError(f"log of non-positive or non-finite value {bad[np.argmax((bad <= 0) | ~np.isfinite(bad))]!r}")
    return tape._push("log", np.log(av), (a.index,), lambda g, needs: (g / av,))


def maximum(a, c: float) -> Var:
    """Elementwise ``max(a, c)`` for a constant ``c``; derivative 0 at the tie."""
    tape = _tape_of(a)
    av = a.value
    mask = (av > c).astype(float)
    return tape._push("maximum", np.where(mask, av, c), (a.index,), lambda g, needs: (g * mask,))


def relu(a) -> Var:
    tape = _tape_of(a)
    av = a.value
    # a float mask multiplies faster than a boolean one
    mask = (av > 0).astype(float)
    out = np.maximum(av, 0.0)
    return tape._push("relu", out, (a.index,), lambda g, needs: (g * mask,))


def stable_logistic(x) -> np.ndarray:
    """``1 / (1 + exp(-x))`` without overflow; monotone in floating point."""
    z = np.clip(x, -_LOGISTIC_CLIP, _LOGISTIC_CLIP)
    return 1.0 / (1.0 + np.exp(-z))


def logistic(a) -> Var:
    tape = _tape_of(a)
    out = stable_logistic(a.value)
    return tape._push("logistic", out, (a.index,), lambda g, needs: (g * out * (1.0 - out),))


def matmul(a, b) -> Var:
    """Matrix-matrix or matrix-vector product."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2):
        raise ValueError(f"matmul expects (m,k) @ (k,) or (k,n), got {av.shape} @ {bv.shape}")

    def vjp(g, needs):
        ga = gb = None
        if bv.ndim == 1:
            if needs[0]:
                ga = np.outer(g, bv)
            if needs[1]:
                gb = av.T @ g
        else:
            if needs[0]:
                ga = g @ bv.T
            if needs[1]:
                gb = av.T @ g
        return ga, gb

    return tape._push("matmul", av @ bv, (a.index, b.index), vjp)


def sum(a, axis=None) -> Var:  # noqa: A001 - mirrors numpy
    tape = _tape_of(a)
    shape = a.shape

    def vjp(g, needs):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return tape._push("sum", np.sum(a.value, axis=axis), (a.index,), vjp)


def mean(a) -> Var:
    return sum(a) * (1.0 / np.size(a.value))


def cumsum(a, axis: int = -1) -> Var:
    tape = _tape_of(a)

    def vjp(g, needs):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return tape._push("cumsum", np.cumsum(a.value, axis=axis), (a.index,), vjp)


def reshape(a, shape) -> Var:
    tape = _tape_of(a)
    old = a.shape
    return tape._push("reshape", np.reshape(a.value, shape), (a.index,),
                      lambda g, needs: (np.reshape(g, old),))


def take(a, indices, axis=None) -> Var:
    """Gather like ``np.take``; repeated indices accumulate in the backward pass."""
    tape = _tape_of(a)
    idx = np.asarray(indices)
    av = a.value

    def vjp(g, needs):
        out = np.zeros_like(av)
        if axis is None:
            np.add.at(out.reshape(-1), idx, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return tape._push("take", np.take(av, idx, axis=axis), (a.index,), vjp)


def scatter(values, flat_index, shape) -> Var:
    """Place ``values`` at distinct flat positions of a zero array of ``shape``."""
    tape = _tape_of(values)
    flat_index = np.asarray(flat_index)
    out = np.zeros(int(np.prod(shape)))
    out[flat_index] = values.value
    return tape._push("scatter", out.reshape(shape), (values.index,),
                      lambda g, needs: (np.reshape(g, -1)[flat_index],))


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return tape._push("concat", np.concatenate([x.value for x in xs], axis=axis),
                      tuple(x.index for x in xs), vjp)


def apply(fn: Callable[..., Var], *values) -> tuple[Tape, list[Var], Var]:
    """Evaluate ``fn`` on fresh leaves built from ``values``; handy in tests."""
    tape = Tape()
    leaves = [tape.leaf(v) for v in values]
    return tape, leaves, fn(*leaves)
