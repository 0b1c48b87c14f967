"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and remembers how it was produced; calling
``backward()`` on a scalar result walks the graph in reverse topological
order and accumulates gradients into every node. Parameter leaves created
by a :class:`~factvqa.substrate.params.ParameterStore` additionally flush
their gradient into the store's per-parameter gradient buffer, which is
what the optimizer and the finite-difference checker consume.

Everything is computed in 64-bit floats. The op set is intentionally
small: just what dense layers, gated recurrent units, bilinear pooling,
and softmax attention need.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, DimensionError


def as_array(x) -> np.ndarray:
    """Coerce to a float64 ndarray without copying when already one."""
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "_slot")

    def __init__(self, data, parents=(), backward=None, slot=None):
        self.data = data if isinstance(data, np.ndarray) else as_array(data)
        self.grad = None
        self._parents = parents
        self._backward = backward
        # (store, name) for parameter leaves; backward() flushes into the store
        self._slot = slot

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Backpropagate from a scalar root and flush parameter gradients."""
        if self.data.shape != ():
            raise DimensionError(
                f"backward() needs a scalar root, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            if node._slot is not None and node.grad is not None:
                store, name = node._slot
                store.grads[name] += node.grad


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(as_array(x))


def constant(x) -> Tensor:
    """A graph leaf that receives no gradient flush (plain data)."""
    return Tensor(as_array(x))


def _accum(t: Tensor, g: np.ndarray):
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, parents=(a,))
    out._backward = lambda g: _accum(a, -g)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for the (2D@1D, 2D@2D, 1D@2D) cases."""
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2:
        raise DimensionError(f"matmul supports 1D/2D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd, parents=(a, b))

    def backward(g):
        if ad.ndim == 2 and bd.ndim == 1:
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        elif ad.ndim == 2 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        else:  # 1D @ 2D
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))

    out._backward = backward
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, parents=(a,))
    out._backward = lambda g: _accum(a, g * (1.0 - y * y))
    return out


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y, parents=(a,))
    out._backward = lambda g: _accum(a, g * y * (1.0 - y))
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    if a.data.size == 0:
        raise DimensionError("softmax of an empty array")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, parents=(a,))

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    out._backward = backward
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum()), parents=(a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g, a.data.shape).copy())
    return out


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate 1D tensors."""
    out = Tensor(np.concatenate([p.data for p in parts]), parents=tuple(parts))
    sizes = [p.data.shape[0] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[off:off + n])
            off += n

    out._backward = backward
    return out


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack 1D tensors of equal length into a 2D matrix."""
    out = Tensor(np.stack([r.data for r in rows]), parents=tuple(rows))

    def backward(g):
        for i, r in enumerate(rows):
            _accum(r, g[i])

    out._backward = backward
    return out


def take_row(a: Tensor, i: int) -> Tensor:
    if not 0 <= i < a.data.shape[0]:
        raise IndexError(f"row {i} out of range for shape {a.data.shape}")
    out = Tensor(a.data[i], parents=(a,))

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[i] = g
        _accum(a, buf)

    out._backward = backward
    return out


def take_rows(a: Tensor, indices: list[int]) -> Tensor:
    """Gather rows of a 2D tensor (embedding lookup)."""
    n = a.data.shape[0]
    for i in indices:
        if not 0 <= i < n:
            raise IndexError(f"row {i} out of range for shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx], parents=(a,))

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    out._backward = backward
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))
    out._backward = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T, parents=(a,))
    out._backward = lambda g: _accum(a, g.T)
    return out


PROB_FLOOR = 1e-12


def cross_entropy(probs: Tensor, target: int) -> Tensor:
    """Negative log-likelihood of ``target`` under a 1D probability vector.

    Probabilities are floored at ``PROB_FLOOR`` so degenerate inputs cannot
    produce -log(0); inside the floored region the gradient is zero.
    """
    n = probs.data.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} classes")
    p = probs.data[target]
    clamped = p < PROB_FLOOR
    out = Tensor(np.asarray(-np.log(max(p, PROB_FLOOR))), parents=(probs,))

    def backward(g):
        buf = np.zeros_like(probs.data)
        if not clamped:
            buf[target] = -g / p
        _accum(probs, buf)

    out._backward = backward
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: zero entries with probability p, scale survivors.

    Identity in eval mode and at p=0. The rng is consumed only in train
    mode, so eval-mode graphs stay independent of the dropout stream.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * mask, parents=(a,))
    out._backward = lambda g: _accum(a, g * mask)
    return out
