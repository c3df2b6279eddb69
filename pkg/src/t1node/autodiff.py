"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Every op returns a :class:`Node` holding its value and a closure that maps the
node's gradient to its parents' gradients. Broadcasting follows numpy rules;
gradients are summed back to each parent's shape.

Two global switches exist:

* :func:`no_grad` stops graph recording (inference).
* :func:`exact_rows` makes :func:`linear_map` use a row-wise kernel so that a
  row's result does not depend on how many rows share the batch. BLAS matmul
  does not guarantee this.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_state = {"grad": True, "exact_rows": False}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def exact_rows(enabled: bool = True):
    prev = _state["exact_rows"]
    _state["exact_rows"] = enabled
    try:
        yield
    finally:
        _state["exact_rows"] = prev


class Node:
    __slots__ = ("value", "parents", "backward_rule", "grad", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_rule=None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    # operator sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)


def parameter(value, name: str | None = None) -> Node:
    """A leaf whose gradient is accumulated by :func:`backward`."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _make(value, parents: Iterable[Node], rule: Callable) -> Node:
    parents = tuple(parents)
    if _state["grad"] and any(p.requires_grad for p in parents):
        return Node(value, parents, rule, requires_grad=True)
    return Node(value)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ValueError(f"shape mismatch: {shapes}") from None


# --------------------------------------------------------------------------- #
# elementwise
# --------------------------------------------------------------------------- #


def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a.shape, b.shape)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a.shape, b.shape)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a.shape, b.shape)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_broadcast(a.shape, b.shape)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def neg(a) -> Node:
    a = constant(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Node:
    a = constant(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = constant(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Node:
    a = constant(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Node:
    a = constant(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Node:
    a = constant(a)
    av = a.value
    return _make(np.logaddexp(0.0, av), (a,), lambda g: (g * _sigmoid(av),))


def square(a) -> Node:
    a = constant(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a) -> Node:
    a = constant(a)
    out = np.sqrt(a.value)
    pos = out > 0
    # zero gradient at 0 instead of inf * 0
    return _make(out, (a,), lambda g: (np.where(pos, 0.5 * g / np.where(pos, out, 1.0), 0.0),))


def power(a, p: float) -> Node:
    a = constant(a)
    av = a.value
    return _make(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def absolute(a) -> Node:
    a = constant(a)
    av = a.value
    return _make(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def maximum(a, b) -> Node:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = constant(a), constant(b)
    _check_broadcast(a.shape, b.shape)
    pick = a.value >= b.value
    return _make(np.where(pick, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(pick, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick, 0.0, g), b.shape)))


def minimum(a, b) -> Node:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = constant(a), constant(b)
    _check_broadcast(a.shape, b.shape)
    pick = a.value <= b.value
    return _make(np.where(pick, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(pick, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick, 0.0, g), b.shape)))


def where(cond, a, b) -> Node:
    """Select ``a`` where the (non-differentiable) mask is true, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = constant(a), constant(b)
    shape = _check_broadcast(cond.shape, a.shape, b.shape)
    return _make(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


def lincomb(coeffs: Sequence[float], nodes: Sequence[Node]) -> Node:
    """``sum_j coeffs[j] * nodes[j]`` for equally shaped nodes, as one graph node."""
    pairs = [(float(c), constant(n)) for c, n in zip(coeffs, nodes) if c != 0.0]
    if not pairs:
        raise ValueError("lincomb needs at least one non-zero coefficient")
    out = pairs[0][0] * pairs[0][1].value
    for c, n in pairs[1:]:
        if n.shape != pairs[0][1].shape:
            raise ValueError(f"shape mismatch: {n.shape} vs {pairs[0][1].shape}")
        out = out + c * n.value
    return _make(out, [n for _, n in pairs], lambda g: tuple(c * g for c, _ in pairs))


# --------------------------------------------------------------------------- #
# reductions and structure
# --------------------------------------------------------------------------- #


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = constant(a)
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = constant(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def linear_map(x, W, b=None) -> Node:
    """``x @ W.T + b`` for ``x`` of shape (in,) or (batch, in) and ``W`` (out, in)."""
    x, W = constant(x), constant(W)
    if W.value.ndim != 2 or x.shape[-1] != W.shape[1] or x.value.ndim > 2:
        raise ValueError(f"shape mismatch: x {x.shape}, W {W.shape}")
    xv, Wv = x.value, W.value
    if _state["exact_rows"]:
        out = np.einsum("...i,oi->...o", xv, Wv)
    else:
        out = xv @ Wv.T
    parents = [x, W]
    if b is not None:
        b = constant(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"shape mismatch: bias {b.shape}, W {W.shape}")
        out = out + b.value
        parents.append(b)

    def rule(g):
        gx = g @ Wv
        gW = np.outer(g, xv) if xv.ndim == 1 else g.T @ xv
        grads = [gx, gW]
        if b is not None:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, rule)


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [constant(n) for n in nodes]
    vals = [n.value for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ValueError(f"shape mismatch in concat: {[v.shape for v in vals]}") from None
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(out, nodes, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, idx) -> Node:
    """Basic slicing / indexing ``a[idx]``."""
    a = constant(a)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.value[idx], (a,), rule)


def reshape(a, shape) -> Node:
    a = constant(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# --------------------------------------------------------------------------- #
# backward
# --------------------------------------------------------------------------- #


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node upstream of ``root``.

    Calling it twice without :func:`reset_grads` adds the gradients again.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending = {id(root): np.ones_like(root.value)}
    for node in reversed(_topological(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node.backward_rule is None:
            continue
        for p, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not p.requires_grad:
                continue
            pk = id(p)
            pending[pk] = pg if pk not in pending else pending[pk] + pg


def reset_grads(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


def numeric_grad(f: Callable[[], float], leaf: Node, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. ``leaf.value``."""
    grad = np.zeros_like(leaf.value)
    flat = leaf.value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return grad
