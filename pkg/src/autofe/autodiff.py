"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough operator coverage for a recurrent encoder, an MLP head and an
attention decoder: elementwise arithmetic, matmul, activations, reductions,
column slicing/concat and embedding-row gather.  Everything is float64 so
gradients can be checked against central finite differences tightly.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = ["Tensor", "concat", "gather_rows", "check_gradient"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable[[np.ndarray], None]] = None,
        requires_grad: bool = True,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def backward(self, seed: Optional[np.ndarray] = None):
        """Reverse sweep from this node; accumulates into .grad of ancestors."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data) if seed is None else seed)
        for node in reversed(topo):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    # -- arithmetic -------------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor(self.data + other.data, (self, other))
        out.backward_fn = lambda g: (
            self._accumulate(_unbroadcast(g, self.data.shape)),
            other._accumulate(_unbroadcast(g, other.data.shape)),
        )
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out.backward_fn = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data * other.data, (self, other))
        out.backward_fn = lambda g: (
            self._accumulate(_unbroadcast(g * other.data, self.data.shape)),
            other._accumulate(_unbroadcast(g * self.data, other.data.shape)),
        )
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data @ other.data, (self, other))

        def back(g):
            if self.data.ndim == 1:
                self._accumulate(g @ other.data.T if other.data.ndim == 2 else g * other.data)
            else:
                self._accumulate(g @ other.data.T if other.data.ndim == 2 else np.outer(g, other.data))
            if other.data.ndim == 1:
                other._accumulate(self.data.T @ g if self.data.ndim == 2 else self.data * g)
            else:
                other._accumulate(self.data.T @ g if self.data.ndim == 2 else np.outer(self.data, g))

        out.backward_fn = back
        return out

    # -- activations and elementwise functions ----------------------------

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(y, (self,))
        out.backward_fn = lambda g: self._accumulate(g * y * (1.0 - y))
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, (self,))
        out.backward_fn = lambda g: self._accumulate(g * (1.0 - y * y))
        return out

    def relu(self):
        mask = self.data > 0
        out = Tensor(self.data * mask, (self,))
        out.backward_fn = lambda g: self._accumulate(g * mask)
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, (self,))
        out.backward_fn = lambda g: self._accumulate(g * y)
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out.backward_fn = lambda g: self._accumulate(g / self.data)
        return out

    def square(self):
        out = Tensor(self.data * self.data, (self,))
        out.backward_fn = lambda g: self._accumulate(2.0 * g * self.data)
        return out

    # -- reductions and shaping -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        out.backward_fn = back
        return out

    def slice_cols(self, start: int, stop: int):
        out = Tensor(self.data[..., start:stop], (self,))

        def back(g):
            full = np.zeros_like(self.data)
            full[..., start:stop] = g
            self._accumulate(full)

        out.backward_fn = back
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out.backward_fn = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    def transpose(self):
        out = Tensor(self.data.T, (self,))
        out.backward_fn = lambda g: self._accumulate(g.T)
        return out

    def logsumexp_cols(self):
        """Row-wise log(sum(exp)) over the last axis, keepdims."""
        m = self.data.max(axis=-1, keepdims=True)
        e = np.exp(self.data - m)
        s = e.sum(axis=-1, keepdims=True)
        out = Tensor(m + np.log(s), (self,))
        out.backward_fn = lambda g: self._accumulate(g * e / s)
        return out

    def softmax_cols(self):
        """Row-wise softmax over the last axis."""
        m = self.data.max(axis=-1, keepdims=True)
        e = np.exp(self.data - m)
        y = e / e.sum(axis=-1, keepdims=True)
        out = Tensor(y, (self,))

        def back(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            self._accumulate(y * (g - dot))

        out.backward_fn = back
        return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), tuple(tensors))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(a, b)
            t._accumulate(g[tuple(idx)])

    out.backward_fn = back
    return out


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[indices], (table,))

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        table._accumulate(full)

    out.backward_fn = back
    return out


def check_gradient(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    atol: float = 1e-6,
):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds and returns the scalar loss from the current parameter
    values; parameter .grad fields are cleared before the analytic pass.
    ``atol`` floors the denominator so coordinates whose true gradient is at
    the finite-difference noise level do not dominate the relative error.
    """
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        it = np.nditer(p.data, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            keep = p.data[i]
            p.data[i] = keep + eps
            hi = float(fn().data)
            p.data[i] = keep - eps
            lo = float(fn().data)
            p.data[i] = keep
            numeric = (hi - lo) / (2 * eps)
            denom = max(abs(numeric), abs(analytic[i]), atol)
            worst = max(worst, abs(numeric - analytic[i]) / denom)
            it.iternext()
    return worst
