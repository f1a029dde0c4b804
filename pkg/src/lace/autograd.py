"""A small reverse-mode differentiation tape over numpy arrays.

Operations append nodes to a :class:`Tape` in execution order; ``backward``
walks them in reverse and accumulates vector-Jacobian products. Nodes whose
inputs need no gradient are recorded as constants, so running a model on a
``Tape(record=False)`` costs nothing beyond the forward arithmetic.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    y = (tape.const(x) @ w).sum()
    grads = tape.backward(y)
    grads[w]
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class StaleTapeError(RuntimeError):
    """Raised when a tape is reused after its backward pass."""


class Node:
    __slots__ = ("value", "tape", "parents", "vjp", "requires_grad", "index")

    def __init__(self, value, tape, parents=(), vjp=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.closed = False

    def leaf(self, value, requires_grad: bool = True) -> Node:
        self._check_open()
        node = Node(np.asarray(value, dtype=np.float64), self, requires_grad=requires_grad and self.record)
        if node.requires_grad:
            self._push(node)
        return node

    def const(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64), self)

    def _check_open(self):
        if self.closed:
            raise StaleTapeError("tape already consumed by backward(); record a new forward pass")

    def _push(self, node: Node):
        node.index = len(self.nodes)
        self.nodes.append(node)

    def op(self, value, parents: Sequence[Node], vjp: Callable) -> Node:
        """Record ``value`` computed from ``parents``.

        ``vjp(g)`` must return one gradient (or ``None``) per parent.
        """
        self._check_open()
        needs = self.record and any(p.requires_grad for p in parents)
        node = Node(value, self, tuple(parents) if needs else (), vjp if needs else None, needs)
        if needs:
            self._push(node)
        return node

    def backward(self, out: Node, grad=None) -> "Gradients":
        """Accumulate gradients of ``out`` into every recorded node.

        Returns a lookup from node to gradient; unreached nodes read as zeros.
        """
        self._check_open()
        if out.tape is not self:
            raise ValueError("output node belongs to a different tape")
        self.closed = True
        if not out.requires_grad:
            return Gradients({})
        seed = np.ones_like(out.value) if grad is None else np.asarray(grad, dtype=np.float64)
        grads: dict[int, np.ndarray] = {out.index: seed}
        for node in reversed(self.nodes[: out.index + 1]):
            g = grads.get(node.index)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        return Gradients(grads)


class Gradients:
    """Node-keyed view of the gradient table."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, node: Node):
        g = self._grads.get(node.index) if node.index >= 0 else None
        return np.zeros_like(node.value) if g is None else g

    def __contains__(self, node):
        return node.index in self._grads


def _as_node(x, tape: Tape) -> Node:
    return x if isinstance(x, Node) else tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    return tape.op(a.value + b.value, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    return tape.op(a.value - b.value, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    return tape.op(
        a.value * b.value,
        (a, b),
        lambda g: (unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)),
    )


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)

    # (..., K) @ (K, N) runs as one flat GEMM; numpy would loop over the batch
    flat = b.value.ndim == 2 and a.value.ndim > 2

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.value.T).reshape(a.shape)
            else:
                ga = unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    if flat:
        out = (a.value.reshape(-1, a.shape[-1]) @ b.value).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.value @ b.value
    return tape.op(out, (a, b), vjp)


def sum_(x: Node, axis=None, keepdims=False) -> Node:
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return x.tape.op(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def square(x: Node) -> Node:
    return x.tape.op(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def reshape(x: Node, shape) -> Node:
    old = x.shape
    return x.tape.op(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Node, axes) -> Node:
    inv = np.argsort(axes)
    return x.tape.op(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def silu(x: Node) -> Node:
    s = 1.0 / (1.0 + np.exp(-x.value))
    return x.tape.op(x.value * s, (x,), lambda g: (g * s * (1.0 + x.value * (1.0 - s)),))


def softmax(x: Node, axis: int = -1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return x.tape.op(p, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def normalize(x: Node, eps: float = 1e-5) -> Node:
    """``(x - mean) / sqrt(var + eps)`` over the last axis."""
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    return x.tape.op(xhat, (x,), vjp)


def custom(value, inputs: Sequence[Node], vjp: Callable) -> Node:
    """Record an externally computed value with a user-supplied VJP."""
    tape = _tape_of(*inputs)
    return tape.op(np.asarray(value, dtype=np.float64), tuple(inputs), vjp)
