"""Minimal reverse-mode autodiff over numpy arrays.

Exactly the primitives the policy networks need: dense algebra, the GRU
nonlinearities, softmax/log-softmax heads and the PPO clipping ops.  Values
are float64 throughout; graphs are built eagerly and freed after backward.
``no_grad()`` suppresses graph construction for rollout-time forwards.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- construction helpers ----------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return mul(tsum(self, axis), 1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out = Tensor(data, _parents=parents, _backward=backward)
        out.requires_grad = True
        return out
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))
    return _make(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    def bw(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    def bw(g):
        if axis is None:
            a._accum(np.full_like(a.data, float(g)))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())
    return _make(a.data.sum(axis=axis), (a,), bw)


def concat(parts, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p._accum(g[tuple(idx)])
    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    def bw(g):
        a._accum(g * mask)
    return _make(a.data * mask, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    def bw(g):
        a._accum(g * (1.0 - out_data ** 2))
    return _make(out_data, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60, 60)))
    def bw(g):
        a._accum(g * out_data * (1.0 - out_data))
    return _make(out_data, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    def bw(g):
        a._accum(g * out_data)
    return _make(out_data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    def bw(g):
        a._accum(g / a.data)
    return _make(np.log(a.data), (a,), bw)


def square(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, a)


def clip(a, lo: float, hi: float) -> Tensor:
    """Gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    def bw(g):
        a._accum(g * mask)
    return _make(np.clip(a.data, lo, hi), (a,), bw)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    def bw(g):
        a._accum(_unbroadcast(g * take_a, a.data.shape))
        b._accum(_unbroadcast(g * ~take_a, b.data.shape))
    return _make(np.where(take_a, a.data, b.data), (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    def bw(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        a._accum(p * (g - dot))
    return _make(p, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    def bw(g):
        a._accum(g - np.exp(ls) * g.sum(axis=axis, keepdims=True))
    return _make(ls, (a,), bw)
