"""Minimal reverse-mode automatic differentiation over numpy arrays.

The vocabulary is deliberately small: matmul, add/sub/mul, relu, masked
softmax, layer norm, reshaping, indexing/padding/concatenation, reductions
and a fused softmax cross-entropy.  Graph nodes are recorded only when some
input requires a gradient, so inference runs without bookkeeping.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import numerics


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars follow the other operand's dtype instead of promoting it
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = numerics.matmul(ad, bd)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(out, (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return Tensor._make(numerics.relu(x.data), (x,), lambda g: (g * pos,))


def masked_softmax(x, mask: np.ndarray | None) -> Tensor:
    x = as_tensor(x)
    p = numerics.masked_softmax_rows(x.data, mask)
    return Tensor._make(p, (x,), lambda g: (numerics.softmax_backward(p, g),))


def layer_norm(x, gain, bias, eps: float | None = None) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    eps = numerics.layer_norm_eps(x.dtype) if eps is None else eps
    out = numerics.layer_norm(x.data, gain.data, bias.data, eps)

    def backward(g):
        return numerics.layer_norm_backward(x.data, gain.data, g, eps)

    return Tensor._make(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return Tensor._make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def index(x, key) -> Tensor:
    """Basic or advanced indexing; the backward scatters with accumulation."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, key, g)
        return (out,)

    return Tensor._make(x.data[key], (x,), backward)


def take(x, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis (repeats allowed)."""
    x = as_tensor(x)
    indices = np.asarray(indices)
    shape, dtype = x.shape, x.dtype
    ax = axis % x.ndim

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return (out,)

    return Tensor._make(np.take(x.data, indices, axis=ax), (x,), backward)


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def pad(x, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` as in :func:`numpy.pad`."""
    x = as_tensor(x)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return Tensor._make(np.pad(x.data, widths), (x,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max reduction; ties send the gradient to the first maximal entry."""
    x = as_tensor(x)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, arg, g, axis=axis)
        return (full,)

    return Tensor._make(out if keepdims else np.squeeze(out, axis), (x,), backward)


def softmax_cross_entropy(logits, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``weights`` (same shape as ``labels``) selects which positions count.
    """
    logits = as_tensor(logits)
    z = logits.data
    labels = np.asarray(labels)
    w = np.ones(labels.shape, dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross-entropy over an empty selection")
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (w / total)[..., None],)

    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), backward)
