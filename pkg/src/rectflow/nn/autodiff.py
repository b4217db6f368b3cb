"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  ``Tensor.backward``
walks the recorded graph in reverse topological order.  Only the operations
needed by the MLP velocity network and the flow/distillation losses exist.
"""

from __future__ import annotations

import numpy as np

from ..errors import StateError


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def _accumulate(self, g, fresh=False):
        # ``fresh`` marks a newly allocated array that nobody else references
        if self.grad is None:
            if fresh and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    @staticmethod
    def _make(data, parents, backward):
        parents = tuple(p for p in parents if p.requires_grad)
        if not parents:
            return Tensor(data)
        return Tensor(data, True, parents, backward)

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = None

        def backward():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad, other.shape))

        out = Tensor._make(self.data + other.data, (self, other), backward)
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        out = None

        def backward():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-out.grad, other.shape))

        out = Tensor._make(self.data - other.data, (self, other), backward)
        return out

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return self * -1.0

    def __mul__(self, other):
        other = as_tensor(other)
        out = None

        def backward():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad * other.data, self.shape), fresh=True)
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad * self.data, other.shape), fresh=True)

        out = Tensor._make(self.data * other.data, (self, other), backward)
        return out

    __rmul__ = __mul__

    def square(self):
        out = None

        def backward():
            self._accumulate(2.0 * self.data * out.grad, fresh=True)

        out = Tensor._make(self.data * self.data, (self,), backward)
        return out

    def silu(self):
        with np.errstate(over="ignore"):
            sig = np.exp(-self.data)
        sig += 1.0
        np.reciprocal(sig, out=sig)
        out = None

        def backward():
            self._accumulate(out.grad * sig * (1.0 + self.data * (1.0 - sig)), fresh=True)

        out = Tensor._make(self.data * sig, (self,), backward)
        return out

    # -- linear algebra and reductions -----------------------------------------

    def __matmul__(self, other):
        other = as_tensor(other)
        out = None

        def backward():
            if self.requires_grad:
                self._accumulate(out.grad @ other.data.T, fresh=True)
            if other.requires_grad:
                other._accumulate(self.data.T @ out.grad, fresh=True)

        out = Tensor._make(self.data @ other.data, (self, other), backward)
        return out

    def sum(self, axis=None):
        out = None

        def backward():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        out = Tensor._make(self.data.sum(axis=axis), (self,), backward)
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def take_rows(self, index):
        """Row gather ``self[index]``, used as an embedding lookup."""
        index = np.asarray(index, dtype=np.intp)
        out = None

        def backward():
            g = np.zeros_like(self.data)
            np.add.at(g, index, out.grad)
            self._accumulate(g)

        out = Tensor._make(self.data[index], (self,), backward)
        return out

    # -- graph traversal --------------------------------------------------------

    def backward(self):
        if not self.requires_grad:
            raise StateError("backward() on a tensor with no recorded graph")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        # free intermediate buffers; leaves keep theirs
        for node in order:
            if node._parents:
                node.grad = None
                node._backward = None
                node._parents = ()


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = None

    def backward():
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(sl)])

    out = Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)
    return out
