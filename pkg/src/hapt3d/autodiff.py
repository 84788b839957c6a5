"""Minimal reverse-mode automatic differentiation over numpy arrays.

Everything runs in float64. A ``Var`` wraps an ndarray and records the
operation that produced it; ``backward`` walks the recorded graph once and
accumulates gradients into every reachable ``Var`` with ``requires=True``.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the computation graph: value, gradient slot, parent links."""

    __slots__ = ("data", "grad", "requires", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, requires=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        if requires is None:
            requires = any(p.requires for p in self._parents)
        self.requires = requires

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires={self.requires})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_var(other)
        out = Var(self.data + other.data, (self, other))

        def bwd(g):
            accumulate(self, _unbroadcast(g, self.data.shape))
            accumulate(other, _unbroadcast(g, other.data.shape))

        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.data, (self,))
        out._backward = lambda g: accumulate(self, -g, owned=True)
        return out

    def __sub__(self, other):
        other = as_var(other)
        out = Var(self.data - other.data, (self, other))

        def bwd(g):
            accumulate(self, _unbroadcast(g, self.data.shape))
            accumulate(other, -_unbroadcast(g, other.data.shape), owned=True)

        out._backward = bwd
        return out

    def __rsub__(self, other):
        return as_var(other) - self

    def __mul__(self, other):
        other = as_var(other)
        out = Var(self.data * other.data, (self, other))

        def bwd(g):
            if self.requires:
                accumulate(self, _unbroadcast(g * other.data, self.data.shape), owned=True)
            if other.requires:
                accumulate(other, _unbroadcast(g * self.data, other.data.shape), owned=True)

        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_var(other)
        out = Var(self.data / other.data, (self, other))

        def bwd(g):
            if self.requires:
                accumulate(self, _unbroadcast(g / other.data, self.data.shape), owned=True)
            if other.requires:
                accumulate(
                    other,
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape),
                    owned=True,
                )

        out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return as_var(other) / self

    def matmul(self, other):
        other = as_var(other)
        out = Var(self.data @ other.data, (self, other))

        def bwd(g):
            if self.requires:
                accumulate(self, g @ other.data.T, owned=True)
            if other.requires:
                accumulate(other, self.data.T @ g, owned=True)

        out._backward = bwd
        return out

    __matmul__ = matmul

    # -- elementwise nonlinearities -----------------------------------------

    def relu(self):
        mask = self.data > 0.0
        out = Var(np.where(mask, self.data, 0.0), (self,))
        out._backward = lambda g: accumulate(self, g * mask, owned=True)
        return out

    def exp(self):
        ex = np.exp(self.data)
        out = Var(ex, (self,))
        out._backward = lambda g: accumulate(self, g * ex, owned=True)
        return out

    def log(self):
        out = Var(np.log(self.data), (self,))
        out._backward = lambda g: accumulate(self, g / self.data, owned=True)
        return out

    def sqrt(self):
        root = np.sqrt(self.data)
        out = Var(root, (self,))
        out._backward = lambda g: accumulate(self, g / (2.0 * root), owned=True)
        return out

    # -- reductions and reshaping -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Var(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            accumulate(self, np.broadcast_to(g, self.data.shape))

        out._backward = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out = Var(self.data.reshape(*shape), (self,))
        out._backward = lambda g: accumulate(self, g.reshape(self.data.shape))
        return out

    def gather_rows(self, idx):
        """Select rows (first axis) by integer index array."""
        idx = np.asarray(idx, dtype=np.intp)
        out = Var(self.data[idx], (self,))

        def bwd(g):
            if not self.requires:
                return
            buf = np.zeros_like(self.data)
            np.add.at(buf, idx, g)
            accumulate(self, buf, owned=True)

        out._backward = bwd
        return out

    def take_per_row(self, cols):
        """out[i] = self[i, cols[i]] for a 2-D Var."""
        cols = np.asarray(cols, dtype=np.intp)
        rows = np.arange(self.data.shape[0])
        out = Var(self.data[rows, cols], (self,))

        def bwd(g):
            if not self.requires:
                return
            buf = np.zeros_like(self.data)
            buf[rows, cols] = g
            accumulate(self, buf, owned=True)

        out._backward = bwd
        return out


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64), requires=False)


def param(data) -> Var:
    """A leaf that collects gradients (network weights, test probes)."""
    return Var(np.array(data, dtype=np.float64), requires=True)


def concat(vars_, axis=1) -> Var:
    vars_ = [as_var(v) for v in vars_]
    out = Var(np.concatenate([v.data for v in vars_], axis=axis), tuple(vars_))
    splits = np.cumsum([v.data.shape[axis] for v in vars_])[:-1]

    def bwd(g):
        for v, piece in zip(vars_, np.split(g, splits, axis=axis)):
            accumulate(v, piece)

    out._backward = bwd
    return out


def accumulate(var: Var, g, owned=False) -> None:
    """Add ``g`` into ``var.grad``; copies unless the caller owns ``g``."""
    if not var.requires:
        return
    if var.grad is None:
        var.grad = g if owned else g.copy()
    else:
        var.grad += g


def backward(root: Var) -> None:
    """Populate ``.grad`` on every ``requires`` node reachable from ``root``."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires and id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g
