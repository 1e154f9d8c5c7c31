"""Reverse-mode automatic differentiation over numpy arrays.

Each op builds a node holding its output value, its parents and a closure
that pushes the output gradient back to the parents. ``backward`` walks the
graph in reverse topological order. Everything is float64.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (decoding, scoring)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, name=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if _grad_enabled:
            self.parents = tuple(p for p in parents if p.requires_grad)
        else:
            self.parents = ()
        self.requires_grad = bool(self.parents) or (requires_grad and _grad_enabled)
        self.backward_fn = backward_fn if self.parents else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # never mutate in place: grads may alias arrays owned by other nodes
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    out.backward_fn = bw if out.parents else None
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out.backward_fn = bw if out.parents else None
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, (a,))
    out.backward_fn = (lambda g: _accum(a, -g)) if out.parents else None
    return out


def power(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data**p, (a,))

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    out.backward_fn = bw if out.parents else None
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), (a,))
    out.backward_fn = (lambda g: _accum(a, g * out.data)) if out.parents else None
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), (a,))
    out.backward_fn = (lambda g: _accum(a, g / a.data)) if out.parents else None
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(a.data * mask, (a,))
    out.backward_fn = (lambda g: _accum(a, g * mask)) if out.parents else None
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data), (a,))
    out.backward_fn = (lambda g: _accum(a, g * (1.0 - out.data**2))) if out.parents else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(0.5 * (1.0 + np.tanh(0.5 * a.data)), (a,))
    out.backward_fn = (lambda g: _accum(a, g * out.data * (1.0 - out.data))) if out.parents else None
    return out


# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    out.backward_fn = bw if out.parents else None
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))
    out.backward_fn = (lambda g: _accum(a, g.reshape(a.data.shape))) if out.parents else None
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), (a,))
    out.backward_fn = (lambda g: _accum(a, g.transpose(inv))) if out.parents else None
    return out


def index(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key], (a,))

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    out.backward_fn = bw if out.parents else None
    return out


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accum(t, piece)

    out.backward_fn = bw if out.parents else None
    return out


# ---------------------------------------------------------------------------
# linear algebra and lookups
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    out.backward_fn = bw if out.parents else None
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; scatter-add on the way back."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids], (table,))

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accum(table, full)

    out.backward_fn = bw if out.parents else None
    return out


def pick(a: Tensor, ids: np.ndarray) -> Tensor:
    """Select ``a[..., ids[...]]`` along the last axis."""
    ids = np.asarray(ids)
    vals = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]
    out = Tensor(vals, (a,))

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        _accum(a, full)

    out.backward_fn = bw if out.parents else None
    return out


# ---------------------------------------------------------------------------
# normalisers (max-subtracted)
# ---------------------------------------------------------------------------


def np_log_softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def np_softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis=-1) -> Tensor:
    s = np_softmax(a.data, axis)
    out = Tensor(s, (a,))

    def bw(g):
        _accum(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    out.backward_fn = bw if out.parents else None
    return out


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    ls = np_log_softmax(a.data, axis)
    out = Tensor(ls, (a,))

    def bw(g):
        _accum(a, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    out.backward_fn = bw if out.parents else None
    return out


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def run_backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every node reachable from ``loss``."""
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
