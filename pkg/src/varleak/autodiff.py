"""Minimal reverse-mode automatic differentiation on numpy float64 arrays.

A ``Tensor`` wraps an ndarray and, when gradients are enabled, remembers the
operation that produced it.  Calling :meth:`Tensor.backward` on a scalar loss
walks the recorded graph in reverse topological order and accumulates
gradients into every tensor reachable from the loss that has
``requires_grad=True``.

Everything is float64.  All operations are single-threaded numpy, so given
identical inputs the forward and backward passes are bit-identical between
runs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class UsageError(RuntimeError):
    """Raised when the autodiff API is driven in an unsupported order."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus an optional record of how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _op(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return Tensor._op(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._op(-a.data, (a,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            )

        return Tensor._op(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
            )

        return Tensor._op(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return g @ b.data.T, a.data.T @ g

        return Tensor._op(a.data @ b.data, (a, b), backward)

    # -- reductions and shaping ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, a.data.shape).copy(),)

        return Tensor._op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[i] for i in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor._op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._op(out_data, (a,), lambda g: (g * out_data,))

    def log(self):
        a = self
        return Tensor._op(np.log(a.data), (a,), lambda g: (g / a.data,))

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)
        return Tensor._op(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))

    def sigmoid(self):
        a = self
        # numerically stable two-sided formulation
        out_data = np.where(
            a.data >= 0,
            1.0 / (1.0 + np.exp(-np.clip(a.data, 0, None))),
            np.exp(np.clip(a.data, None, 0)) / (1.0 + np.exp(np.clip(a.data, None, 0))),
        )
        return Tensor._op(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))

    def leaky_relu(self, slope=0.2):
        a = self
        factor = np.where(a.data > 0, 1.0, slope)
        return Tensor._op(a.data * factor, (a,), lambda g: (g * factor,))

    def elu(self, alpha=1.0):
        a = self
        neg = alpha * (np.exp(np.clip(a.data, None, 0.0)) - 1.0)
        out_data = np.where(a.data > 0, a.data, neg)
        factor = np.where(a.data > 0, 1.0, neg + alpha)
        return Tensor._op(out_data, (a,), lambda g: (g * factor,))

    def softmax(self, axis=-1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            return (out_data * (g - dot),)

        return Tensor._op(out_data, (a,), backward)

    def clip(self, lo, hi):
        """Clamp values; gradient passes through only inside [lo, hi]."""
        a = self
        mask = (a.data >= lo) & (a.data <= hi)
        return Tensor._op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))

    def power(self, exponent):
        """Elementwise x**p for a constant exponent (x must stay positive)."""
        a = self
        out_data = np.power(a.data, exponent)
        return Tensor._op(
            out_data, (a,), lambda g: (g * exponent * np.power(a.data, exponent - 1.0),)
        )

    # -- backward pass ---------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad or not self._parents:
            raise UsageError(
                "backward() called without a recorded forward pass; run the "
                "forward in train mode (gradients enabled) first"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        return self

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=-1):
    """Concatenate along an axis, splitting the gradient back apart."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)
