"""Block layout over the downsampled sequence.

Blocks and frames are numbered from 1 and spans are inclusive, so block
``b`` covers frames ``(b-1)*hop + 1 .. (b-1)*hop + block_size`` (truncated
at ``T'``).  :meth:`BlockLayout.frames` converts to a 0-based slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autograd as ag
from .autograd import Tensor

Span = tuple[int, int]


@dataclass(frozen=True)
class BlockLayout:
    t_prime: int
    block_size: int
    hop: int

    def __post_init__(self):
        if self.t_prime < 1:
            raise ValueError("sequence must have at least one frame")
        if not 1 <= self.hop <= self.block_size:
            raise ValueError(f"need 1 <= hop <= block_size, got hop={self.hop}, block_size={self.block_size}")

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.t_prime / self.hop)

    @cached_property
    def spans(self) -> tuple[Span, ...]:
        out = []
        for b in range(1, self.n_blocks + 1):
            start = (b - 1) * self.hop + 1
            out.append((start, min(start + self.block_size - 1, self.t_prime)))
        return tuple(out)

    def span(self, b: int) -> Span:
        return self.spans[b - 1]

    def frames(self, b: int) -> slice:
        lo, hi = self.span(b)
        return slice(lo - 1, hi)

    @property
    def n_groups(self) -> int:
        """Number of interleaved non-overlapping block families (2 for half overlap)."""
        return math.ceil(self.block_size / self.hop)

    def group(self, b: int) -> int:
        return (b - 1) % self.n_groups

    def blocks_in_group(self, g: int) -> list[int]:
        return [b for b in range(1, self.n_blocks + 1) if self.group(b) == g]

    @property
    def center_offset(self) -> int:
        return (self.block_size - self.hop) // 2

    @cached_property
    def owned(self) -> tuple[Span, ...]:
        return tuple(contribution_spans(self))

    @cached_property
    def owner(self) -> np.ndarray:
        """0-based frame index -> owning block (1-based)."""
        out = np.zeros(self.t_prime, dtype=int)
        for b, (lo, hi) in enumerate(self.owned, start=1):
            out[lo - 1:hi] = b
        return out


def make_layout(t_prime: int, block_size: int, hop: int) -> BlockLayout:
    return BlockLayout(t_prime, block_size, hop)


def contribution_spans(layout: BlockLayout) -> list[Span]:
    """Output frames owned by each block.

    Block ``b`` keeps the central ``hop`` frames of its output, starting
    ``floor((block_size - hop) / 2)`` frames into its span.  The first block
    also owns everything before that, the last block everything after.  A
    trailing block whose centre lies past ``T'`` owns nothing; its span is
    returned as ``(lo, lo - 1)``.
    """
    t, off, nb = layout.t_prime, layout.center_offset, layout.n_blocks
    starts = [1] + [min(layout.span(b)[0] + off, t + 1) for b in range(2, nb + 1)]
    out = []
    for b in range(nb):
        lo = starts[b]
        hi = t if b == nb - 1 else starts[b + 1] - 1
        out.append((lo, max(hi, lo - 1)))
    return out


def build_extended(u, c0, n_blocks: int | None = None) -> Tensor:
    """Append one context slot per block after the frames: ``(u_1..u_T', c_1..c_B)``."""
    u = ag.as_tensor(u)
    c0 = ag.as_tensor(c0)
    if c0.shape[-2] < 1:
        raise ValueError("need at least one block")
    if n_blocks is not None and c0.shape[-2] != n_blocks:
        raise ValueError(f"got {c0.shape[-2]} context vectors for {n_blocks} blocks")
    if c0.shape[-1] != u.shape[-1]:
        raise ValueError(f"context width {c0.shape[-1]} != feature width {u.shape[-1]}")
    return ag.concat([u, c0], axis=-2)


def split_extended(u_ext, t_prime: int) -> tuple[Tensor, Tensor]:
    u_ext = ag.as_tensor(u_ext)
    lead = (slice(None),) * (u_ext.ndim - 2)
    return u_ext[lead + (slice(0, t_prime),)], u_ext[lead + (slice(t_prime, None),)]


def check_extended(u_ext_len: int, layout: BlockLayout) -> None:
    if u_ext_len != layout.t_prime + layout.n_blocks:
        raise ValueError(
            f"extended sequence has {u_ext_len} rows, layout needs {layout.t_prime + layout.n_blocks}"
        )
