"""Scaled dot-product and multi-head attention with boolean admissibility masks."""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

_counter = threading.local()


@contextlib.contextmanager
def count_flops():
    """Count attention-core FLOPs (QK^T and weights·V) inside the block.

    Yields a dict whose ``"flops"`` entry is updated in place.  Each
    multiply-add counts as two FLOPs.
    """
    prev = getattr(_counter, "box", None)
    box = {"flops": 0}
    _counter.box = box
    try:
        yield box
    finally:
        _counter.box = prev


def _tally(q_shape, k_shape) -> None:
    box = getattr(_counter, "box", None)
    if box is None:
        return
    *lead, lq, d = q_shape
    lk = k_shape[-2]
    batch = int(np.prod(lead)) if lead else 1
    box["flops"] += 2 * 2 * batch * lq * lk * d


def scaled_dot_attention(q, k, v, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T / sqrt(d)) v`` restricted to admissible keys.

    Returns the output and the post-softmax weight matrix.
    """
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ValueError(f"query width {d} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("keys and values must have the same number of rows")
    if mask is not None and mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise ValueError(f"mask shape {mask.shape} does not match {q.shape[-2]}x{k.shape[-2]}")
    _tally(q.shape, k.shape)
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    weights = ag.masked_softmax(scores, mask)
    return ag.matmul(weights, v), weights


@dataclass(frozen=True)
class MhaParams:
    """Projections of one layer; head ``i`` uses columns ``i*d:(i+1)*d``.

    ``wq``, ``wk``, ``wv`` are ``d_model x (m*d)`` and ``wo`` is ``(m*d) x d_model``.
    Storing the per-head matrices side by side is the same as keeping ``m``
    separate ``d_model x d`` matrices.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo"):
            object.__setattr__(self, name, ag.as_tensor(getattr(self, name)))
        if self.wq.shape[1] % self.n_heads:
            raise ValueError(f"projection width {self.wq.shape[1]} not divisible by {self.n_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.n_heads

    def head(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = self.head_dim
        cols = slice(i * d, (i + 1) * d)
        return self.wq.data[:, cols], self.wk.data[:, cols], self.wv.data[:, cols]


def _split_heads(x: Tensor, m: int) -> Tensor:
    *lead, length, width = x.shape
    return ag.swapaxes(x.reshape(*lead, length, m, width // m), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, m, length, d = x.shape
    return ag.swapaxes(x, -2, -3).reshape(*lead, length, m * d)


def multi_head(q, k, v, params: MhaParams, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """``Concat(head_1..head_m) W_O``; the weights come back as ``(..., m, Lq, Lk)``."""
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    m = params.n_heads
    qh = _split_heads(q @ params.wq, m)
    kh = _split_heads(k @ params.wk, m)
    vh = _split_heads(v @ params.wv, m)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = mask.reshape(mask.shape[:-2] + (1,) + mask.shape[-2:]) if mask.ndim > 2 else mask
    heads, weights = scaled_dot_attention(qh, kh, vh, mask)
    return _merge_heads(heads) @ params.wo, weights
