"""Reverse-mode differentiation on numpy arrays."""
from __future__ import annotations

import numpy as np

_CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def set_finite_checks(enabled):
    """Toggle the NaN/Inf check run after every op; returns the previous setting."""
    global _CHECK_FINITE
    previous, _CHECK_FINITE = _CHECK_FINITE, bool(enabled)
    return previous


class Tensor:
    """An n-d array that records the ops producing it.

    Leaves created with ``requires_grad=True`` accumulate ``grad`` when
    :meth:`backward` is called on a scalar downstream of them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), op="leaf"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def _accumulate(self, g):
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        backward(self, grad)

    # elementwise sugar used by tests and small losses
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data, parents, backward_fn, op):
    """Wrap an op output, wiring its backward closure when any parent needs grads."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype, _parents=parents if needs else (), op=op)
    if needs:
        out._backward = backward_fn
    return out


def topological_order(root):
    """Nodes reachable from ``root`` that require grad, parents before children."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Intermediate gradients are freed once consumed; leaf gradients add up
    across calls until :meth:`Tensor.zero_grad`.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    out = a.data + b.data

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), _backward, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    out = a.data * b.data

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), _backward, "mul")


def neg(a):
    def _backward(g):
        return (-g,)

    return make_result(-a.data, (a,), _backward, "neg")


def power(a, exponent):
    exponent = float(exponent)
    out = a.data**exponent

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return make_result(out.astype(a.dtype), (a,), _backward, "pow")


def tensor_sum(a):
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def _backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_result(out, (a,), _backward, "sum")


def tensor_mean(a):
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)

    def _backward(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return make_result(out, (a,), _backward, "mean")
