"""A small array-valued reverse-mode differentiation tape.

Nodes hold numpy arrays.  Every operation appends a node to the tape that
created its inputs, together with one vector-Jacobian function per input.
``Tape.backward`` walks the nodes in reverse creation order, which is a
valid reverse topological order because a node is created after its inputs.

Second derivatives are obtained by building derivative expressions out of
ordinary taped operations (see ``neural.NeuralSdf.sdf_forward``); the tape itself only
ever runs first-order backward passes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Node:
    __slots__ = ("value", "grad", "parents", "vjps", "tape", "requires_grad", "cache", "name")

    def __init__(self, value, tape: "Tape", parents=(), vjps=(), requires_grad=True, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjps = vjps
        self.tape = tape
        self.requires_grad = requires_grad
        self.cache = None
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def adjoint(self) -> np.ndarray:
        """Adjoint after ``backward``; zeros for nodes the output does not use."""
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self):
        return f"Node(shape={self.shape}, name={self.name!r})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def var(self, value, name=None) -> Node:
        """A differentiable leaf."""
        node = Node(np.asarray(value), self, name=name)
        self.nodes.append(node)
        return node

    def const(self, value, name=None) -> Node:
        node = Node(np.asarray(value), self, requires_grad=False, name=name)
        self.nodes.append(node)
        return node

    def _record(self, value, parents, vjps, name=None) -> Node:
        req = any(p.requires_grad for p in parents)
        node = Node(value, self, tuple(parents), tuple(vjps), requires_grad=req, name=name)
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        """Drop every recorded node (breaks the tape/node reference cycle)."""
        for n in self.nodes:
            n.parents = n.vjps = ()
            n.cache = None
        self.nodes.clear()

    def backward(self, output: Node, seed=None) -> None:
        """Accumulate d(output)/d(node) into ``node.grad`` for every node."""
        for n in self.nodes:
            n.grad = None
        if seed is None:
            if np.size(output.value) != 1:
                raise ValueError("backward needs a seed for non-scalar outputs")
            seed = np.ones_like(output.value)
        output.grad = np.asarray(seed, dtype=output.value.dtype)
        stop = next(i for i in range(len(self.nodes) - 1, -1, -1) if self.nodes[i] is output)
        for node in reversed(self.nodes[: stop + 1]):
            g = node.grad
            if g is None or not node.parents:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _lift(x, tape: Tape, like: "Node | None" = None) -> Node:
    if isinstance(x, Node):
        return x
    if like is not None and np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        # python scalars follow the dtype of the other operand
        return tape.const(np.asarray(x, dtype=like.value.dtype))
    return tape.const(np.asarray(x))


def _lift2(a, b):
    t = _tape_of(a, b)
    if isinstance(a, Node):
        return t, a, _lift(b, t, a)
    return t, _lift(a, t, b), b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    ndim = len(shape)
    while g.ndim > ndim:
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# arithmetic
# --------------------------------------------------------------------------


def add(a, b) -> Node:
    t, a, b = _lift2(a, b)
    sa, sb = a.value.shape, b.value.shape
    return t._record(a.value + b.value, (a, b),
                     (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    t, a, b = _lift2(a, b)
    sa, sb = a.value.shape, b.value.shape
    return t._record(a.value - b.value, (a, b),
                     (lambda g: _unbroadcast(g, sa), lambda g: -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    t, a, b = _lift2(a, b)
    av, bv = a.value, b.value
    return t._record(av * bv, (a, b),
                     (lambda g: _unbroadcast(g * bv, av.shape),
                      lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    t, a, b = _lift2(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return t._record(out, (a, b),
                     (lambda g: _unbroadcast(g / bv, av.shape),
                      lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def neg(a: Node) -> Node:
    return a.tape._record(-a.value, (a,), (lambda g: -g,))


def scale(a: Node, c: float) -> Node:
    """Multiply by a Python constant without creating a constant node."""
    return a.tape._record(a.value * c, (a,), (lambda g: g * c,))


def matmul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(a, t), _lift(b, t)
    av, bv = a.value, b.value
    return t._record(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def affine(x: Node, w: Node, b: Node) -> Node:
    """``x @ w + b`` as one node (x: (n, i), w: (i, o), b: (o,))."""
    t = _tape_of(x, w, b)
    x, w, b = _lift(x, t), _lift(w, t), _lift(b, t)
    xv, wv = x.value, w.value
    return t._record(xv @ wv + b.value, (x, w, b),
                     (lambda g: g @ wv.T, lambda g: xv.T @ g, lambda g: g.sum(axis=0)))


# --------------------------------------------------------------------------
# elementwise functions
# --------------------------------------------------------------------------


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape._record(out, (a,), (lambda g: g * out,))


def log(a: Node) -> Node:
    av = a.value
    return a.tape._record(np.log(av), (a,), (lambda g: g / av,))


def sin(a: Node) -> Node:
    av = a.value
    return a.tape._record(np.sin(av), (a,), (lambda g: g * np.cos(av),))


def cos(a: Node) -> Node:
    av = a.value
    return a.tape._record(np.cos(av), (a,), (lambda g: -g * np.sin(av),))


def square(a: Node) -> Node:
    av = a.value
    return a.tape._record(av * av, (a,), (lambda g: 2.0 * g * av,))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return a.tape._record(out, (a,), (lambda g: 0.5 * g / out,))


def abs_(a: Node) -> Node:
    av = a.value
    return a.tape._record(np.abs(av), (a,), (lambda g: g * np.sign(av),))


# beyond this |beta x| the log1p tail is below float32 resolution; clamping
# keeps exp() out of the subnormal range, which is an order of magnitude slower
SOFTPLUS_TAIL = 80.0


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    r = 1.0 / (1.0 + e)
    return np.where(z >= 0, r, e * r)


def sigmoid(a: Node) -> Node:
    out = _sigmoid_np(a.value)
    return a.tape._record(out, (a,), (lambda g: g * out * (1.0 - out),))


def softplus(a: Node, beta: float = 1.0) -> Node:
    """log(1 + exp(beta x)) / beta in the overflow-free form.

    The logistic ``sigmoid(beta x)`` (its derivative) is cached on the node
    so ``softplus_slope`` can reuse it.
    """
    z = beta * a.value
    az = np.abs(z)
    out = (0.5 * (z + az) + np.log1p(np.exp(-np.minimum(az, SOFTPLUS_TAIL)))) / beta
    slope = 0.5 + 0.5 * np.tanh(0.5 * z)
    node = a.tape._record(out, (a,), (lambda g: g * slope,))
    node.cache = slope
    return node


def softplus_slope(sp: Node, beta: float = 1.0) -> Node:
    """Derivative of ``softplus`` w.r.t. its input, as a differentiable node.

    ``sp`` must be a node returned by :func:`softplus`; the result depends on
    the softplus input ``sp.parents[0]``.
    """
    slope = sp.cache
    x = sp.parents[0]
    return sp.tape._record(slope, (x,), (lambda g: g * beta * slope * (1.0 - slope),))


def maximum(a: Node, c: float) -> Node:
    """max(a, c) against a constant; the subgradient at a tie goes to ``c``."""
    av = a.value
    mask = av > c
    return a.tape._record(np.where(mask, av, c), (a,), (lambda g: g * mask,))


def clip(a: Node, lo: float, hi: float) -> Node:
    av = a.value
    mask = (av > lo) & (av < hi)
    return a.tape._record(np.clip(av, lo, hi), (a,), (lambda g: g * mask,))


# --------------------------------------------------------------------------
# reductions and shape manipulation
# --------------------------------------------------------------------------


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    av = a.value
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return a.tape._record(np.sum(av, axis=axis, keepdims=keepdims), (a,), (vjp,))


def mean(a: Node, axis=None) -> Node:
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def norm(a: Node, axis: int = -1) -> Node:
    """Euclidean norm along ``axis``."""
    av = a.value
    out = np.sqrt(np.sum(av * av, axis=axis))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return np.expand_dims(g / safe, axis) * av

    return a.tape._record(out, (a,), (vjp,))


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return a.tape._record(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))


def getitem(a: Node, index) -> Node:
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, index, g) if _is_fancy(index) else out.__setitem__(index, g)
        return out

    return a.tape._record(av[index], (a,), (vjp,))


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(nodes: Sequence, axis: int = -1) -> Node:
    t = _tape_of(*nodes)
    nodes = [_lift(n, t) for n in nodes]
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    vjps = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(lo), int(hi))
        sl = tuple(sl)
        vjps.append(lambda g, sl=sl: g[sl])
    return t._record(out, nodes, vjps)


def broadcast_to(a: Node, shape) -> Node:
    old = a.value.shape
    return a.tape._record(np.broadcast_to(a.value, shape), (a,),
                          (lambda g: _unbroadcast(g, old),))


def cumprod_exclusive(a: Node) -> Node:
    """T_i = prod_{j<i} a_j along the last axis (T_0 = 1).

    The backward pass uses a reverse scan instead of dividing by ``a``, so
    zero factors are handled exactly.
    """
    av = a.value
    prefix = np.concatenate([np.ones_like(av[..., :1]), np.cumprod(av[..., :-1], axis=-1)],
                            axis=-1)

    def vjp(g):
        n = av.shape[-1]
        out = np.zeros_like(av)
        acc = np.zeros_like(av[..., 0])
        # acc_j = sum_{i>j} g_i prod_{j<k<i} a_k
        for j in range(n - 2, -1, -1):
            acc = g[..., j + 1] + av[..., j + 1] * acc
            out[..., j] = acc * prefix[..., j]
        return out

    return a.tape._record(prefix, (a,), (vjp,))


def value_and_grad(fn: Callable[..., Node], *arrays):
    """Evaluate ``fn`` on fresh leaves and return its value and input gradients."""
    tape = Tape()
    leaves = [tape.var(np.asarray(x, dtype=np.float64)) for x in arrays]
    out = fn(*leaves)
    tape.backward(out)
    return out.value, [leaf.adjoint for leaf in leaves]
