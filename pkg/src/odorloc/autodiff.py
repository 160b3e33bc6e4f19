"""Array-level reverse-mode automatic differentiation.

A :class:`Var` wraps a numpy array and remembers how it was computed.  Calling
:meth:`Var.backward` on a scalar result walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every input that
``requires_grad``.  Only the handful of operations needed for dense networks
and their input derivatives are provided.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents")

    def __init__(self, value, requires_grad: bool = False, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self._parents = tuple(parents) if self.requires_grad else ()

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ----------------------------------------------------
    def backward(self, seed=None) -> None:
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(seed, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, fn in node._parents:
                if parent.requires_grad:
                    contrib = fn(g)
                    key = id(parent)
                    grads[key] = contrib if key not in grads else grads[key] + contrib

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_var(other)
        return Var(self.value + other.value, parents=(
            (self, lambda g, s=self.shape: _unbroadcast(g, s)),
            (other, lambda g, s=other.shape: _unbroadcast(g, s))))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, parents=((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-as_var(other))

    def __rsub__(self, other):
        return as_var(other) + (-self)

    def __mul__(self, other):
        other = as_var(other)
        a, b = self.value, other.value
        return Var(a * b, parents=(
            (self, lambda g, s=self.shape: _unbroadcast(g * b, s)),
            (other, lambda g, s=other.shape: _unbroadcast(g * a, s))))

    __rmul__ = __mul__

    def square(self):
        a = self.value
        return Var(a * a, parents=((self, lambda g: 2.0 * a * g),))

    def tanh(self):
        t = np.tanh(self.value)
        return Var(t, parents=((self, lambda g: g * (1.0 - t * t)),))

    def exp(self):
        e = np.exp(self.value)
        return Var(e, parents=((self, lambda g: g * e),))

    def sum(self, axis=None):
        shape = self.shape
        if axis is None:
            return Var(self.value.sum(), parents=((self, lambda g: np.broadcast_to(g, shape).copy()),))
        return Var(self.value.sum(axis=axis), parents=(
            (self, lambda g: np.broadcast_to(np.expand_dims(g, axis), shape).copy()),))

    def mean(self):
        n = self.value.size
        return self.sum() * (1.0 / n)

    def column(self, k: int):
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            out[:, k] = g
            return out
        return Var(self.value[:, k], parents=((self, back),))


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def linear(x: Var, W: Var, b: Var | None = None) -> Var:
    """``x @ W.T (+ b)`` for a batch ``x`` (n, in) and weights ``W`` (out, in)."""
    x, W = as_var(x), as_var(W)
    xv, Wv = x.value, W.value
    parents = [(x, lambda g: g @ Wv), (W, lambda g: g.T @ xv)]
    out = xv @ Wv.T
    if b is not None:
        b = as_var(b)
        out = out + b.value
        parents.append((b, lambda g: g.sum(axis=0)))
    return Var(out, parents=parents)
