"""Context embedding vectors: initialisation, augmented inputs and the per-block layer step."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .attention import MhaParams, multi_head
from .autograd import Tensor
from .frontend import pe_table


class ContextInitMode(str, enum.Enum):
    PE = "pe"
    AVG = "avg"
    MAX = "max"
    PE_AVG = "pe+avg"
    PE_MAX = "pe+max"

    @property
    def uses_pe(self) -> bool:
        return self in (ContextInitMode.PE, ContextInitMode.PE_AVG, ContextInitMode.PE_MAX)

    @property
    def statistic(self) -> str | None:
        if self in (ContextInitMode.AVG, ContextInitMode.PE_AVG):
            return "avg"
        if self in (ContextInitMode.MAX, ContextInitMode.PE_MAX):
            return "max"
        return None


def init_context(u_b, b: int, mode: ContextInitMode | str) -> Tensor:
    """Initial context vector of block ``b`` (1-based) from its frames ``u_b`` of shape ``(..., L, d)``."""
    mode = ContextInitMode(mode)
    u_b = ag.as_tensor(u_b)
    d = u_b.shape[-1]
    stat = mode.statistic
    if stat is not None and u_b.shape[-2] == 0:
        raise ValueError(f"block {b} is empty; cannot take its {stat}")
    pe = pe_table(1, d, start=b - 1)[0].astype(u_b.dtype)
    if stat is None:
        lead = u_b.shape[:-2]
        return Tensor(np.broadcast_to(pe, lead + (d,)).copy())
    c = ag.mean(u_b, axis=-2) if stat == "avg" else ag.max(u_b, axis=-2)
    return c + pe if mode.uses_pe else c


def _as_row(c: Tensor) -> Tensor:
    return c.reshape(*c.shape[:-1], 1, c.shape[-1])


def augment(z_prev, c_query, c_kv=None) -> tuple[Tensor, Tensor, Tensor]:
    """Append context rows: ``Q = [Z; c_query]`` and ``K = V = [Z; c_kv]`` (or ``[Z]`` if absent)."""
    z_prev = ag.as_tensor(z_prev)
    c_query = ag.as_tensor(c_query)
    if c_query.shape[-1] != z_prev.shape[-1]:
        raise ValueError(f"context width {c_query.shape[-1]} != frame width {z_prev.shape[-1]}")
    q = ag.concat([z_prev, _as_row(c_query)], axis=-2)
    if c_kv is None:
        return q, z_prev, z_prev
    c_kv = ag.as_tensor(c_kv)
    if c_kv.shape[-1] != z_prev.shape[-1]:
        raise ValueError(f"context width {c_kv.shape[-1]} != frame width {z_prev.shape[-1]}")
    kv = ag.concat([z_prev, _as_row(c_kv)], axis=-2)
    return q, kv, kv


@dataclass(frozen=True)
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    mha: MhaParams
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    v1: Tensor
    w2: Tensor
    v2: Tensor

    @classmethod
    def from_tensors(cls, t: Mapping[str, Tensor], n: int, n_heads: int) -> "LayerParams":
        p = f"layer{n}."
        return cls(
            t[p + "ln1.g"], t[p + "ln1.b"],
            MhaParams(t[p + "wq"], t[p + "wk"], t[p + "wv"], t[p + "wo"], n_heads),
            t[p + "ln2.g"], t[p + "ln2.b"],
            t[p + "ffn.w1"], t[p + "ffn.v1"], t[p + "ffn.w2"], t[p + "ffn.v2"],
        )


def ffn_residual(x: Tensor, lp: LayerParams) -> Tensor:
    h = ag.layer_norm(x, lp.ln2_g, lp.ln2_b)
    return x + (ag.relu(h @ lp.w1 + lp.v1) @ lp.w2 + lp.v2)


def layer_forward(z_prev, c_query, c_kv, lp: LayerParams, return_weights: bool = False):
    """One encoder layer on one block.

    ``Z_int = MHD(LN(Q), LN(K), LN(V)) + V`` and ``Z = FFN(LN(Z_int)) + Z_int``,
    where the residual uses the value-side rows.  When ``c_kv`` is absent
    the context row's residual falls back to ``c_query``.  With
    ``c_query=None`` this is a plain pre-norm layer and the returned context
    is ``None``.
    """
    z_prev = ag.as_tensor(z_prev)
    if c_query is None:
        q = kv = residual = z_prev
    else:
        q, kv, _ = augment(z_prev, c_query, c_kv)
        residual = kv if c_kv is not None else q
    qn = ag.layer_norm(q, lp.ln1_g, lp.ln1_b)
    kn = qn if kv is q else ag.layer_norm(kv, lp.ln1_g, lp.ln1_b)
    att, weights = multi_head(qn, kn, kn, lp.mha)
    out = ffn_residual(att + residual, lp)
    if c_query is None:
        z, c = out, None
    else:
        n = out.shape[-2]
        lead = (slice(None),) * (out.ndim - 2)
        z, c = out[lead + (slice(0, n - 1),)], out[lead + (n - 1,)]
    return (z, c, weights) if return_weights else (z, c)


class ContextState:
    """Context vectors ``c^0 .. c^{N_e-1}`` of the last ``gap`` processed blocks of one stream."""

    def __init__(self, n_layers: int, gap: int):
        if gap < 1:
            raise ValueError("gap must be >= 1")
        self.n_layers = n_layers
        self.gap = gap
        self.blocks_done = 0
        self._ring: deque[list[np.ndarray]] = deque(maxlen=gap)

    def predecessor(self, level: int) -> np.ndarray | None:
        """``c^{level}`` of block ``b - gap`` where ``b`` is the next block, if it exists."""
        if len(self._ring) < self.gap:
            return None
        return self._ring[0][level]

    def push(self, contexts: list[np.ndarray]) -> None:
        if len(contexts) != self.n_layers:
            raise ValueError(f"expected {self.n_layers} context vectors, got {len(contexts)}")
        self._ring.append([np.array(c, copy=True) for c in contexts])
        self.blocks_done += 1

    def perturb(self, rng: np.random.Generator, scale: float) -> None:
        """Test hook: add noise to every stored vector."""
        for entry in self._ring:
            for c in entry:
                c += scale * rng.standard_normal(c.shape)
