"""Attention masks for naive and contextual block processing.

A mask is a boolean ``(queries, keys)`` array; ``True`` admits the key.

Overlapping layouts are handled with one mask per *group*: block ``b``
belongs to group ``(b - 1) % n_groups`` and the blocks of one group never
overlap, so each group is evaluated in its own parallel pass.  For half
overlap there are two groups shifted by ``hop`` frames, and a block can only
inherit context from a block of its own group, i.e. two blocks back.

Contextual masks live on the extended sequence of ``T' + B`` rows: frames
first, then one context slot per block (slot ``b`` at 0-based row
``T' + b - 1``).
"""

from __future__ import annotations

import numpy as np

from .blocking import BlockLayout


def slot_row(layout: BlockLayout, b: int) -> int:
    """0-based row of block ``b``'s context slot in the extended sequence."""
    return layout.t_prime + b - 1


def _filler_runs(covered: np.ndarray) -> list[slice]:
    runs, start = [], None
    for i, c in enumerate(covered):
        if not c and start is None:
            start = i
        elif c and start is not None:
            runs.append(slice(start, i))
            start = None
    if start is not None:
        runs.append(slice(start, len(covered)))
    return runs


def _group_frame_mask(layout: BlockLayout, g: int, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    covered = np.zeros(layout.t_prime, dtype=bool)
    for b in layout.blocks_in_group(g):
        fr = layout.frames(b)
        mask[fr, fr] = True
        covered[fr] = True
    # frames outside this group's blocks are never read back; keep their rows valid
    for run in _filler_runs(covered):
        mask[run, run] = True
    return mask


def naive_block_mask(layout: BlockLayout) -> list[np.ndarray]:
    """One block-diagonal ``T' x T'`` mask per group."""
    return [_group_frame_mask(layout, g, layout.t_prime) for g in range(layout.n_groups)]


def _check_gap(layout: BlockLayout, predecessor_gap: int) -> None:
    if predecessor_gap != layout.n_groups:
        raise ValueError(
            f"predecessor gap {predecessor_gap} does not match the layout "
            f"(block {layout.block_size}, hop {layout.hop} needs {layout.n_groups})"
        )


def contextual_mask(
    layout: BlockLayout,
    layer: int,
    predecessor_gap: int,
    group: int = 0,
    context_keys: bool = True,
) -> np.ndarray:
    """Mask for encoder layer ``layer`` (1-based) over the extended sequence.

    Layer 1: rows of block ``b`` (its frames and its slot) admit the block's
    frames and slot ``b``.  Later layers admit the block's frames and slot
    ``b - gap``; without such a predecessor the context column is dropped.
    ``context_keys=False`` removes every context column from frame rows,
    which turns the frame part into the naive block mask.
    """
    if layer < 1:
        raise ValueError("layers are numbered from 1")
    _check_gap(layout, predecessor_gap)
    if not 0 <= group < layout.n_groups:
        raise ValueError(f"group {group} out of range")
    size = layout.t_prime + layout.n_blocks
    mask = _group_frame_mask(layout, group, size)
    active = set(layout.blocks_in_group(group))
    for b in range(1, layout.n_blocks + 1):
        s = slot_row(layout, b)
        if b not in active:
            mask[s, s] = True
            continue
        fr = layout.frames(b)
        mask[s, fr] = True
        src = b if layer == 1 else b - predecessor_gap
        if src >= 1:
            col = slot_row(layout, src)
            mask[s, col] = True
            if context_keys:
                mask[fr, col] = True
    return mask


def contextual_masks(layout: BlockLayout, n_layers: int, group: int = 0,
                     context_keys: bool = True) -> list[np.ndarray]:
    return [contextual_mask(layout, n, layout.n_groups, group, context_keys)
            for n in range(1, n_layers + 1)]


def residual_index(layout: BlockLayout, layer: int, predecessor_gap: int, group: int = 0) -> np.ndarray:
    """Row that feeds each row's residual connection at ``layer``.

    The residual adds the value-side rows, so from layer 2 on a context slot
    takes its residual from the predecessor's slot.  Slots without a
    predecessor, and all frame rows, use themselves.
    """
    _check_gap(layout, predecessor_gap)
    idx = np.arange(layout.t_prime + layout.n_blocks)
    if layer == 1:
        return idx
    for b in layout.blocks_in_group(group):
        if b - predecessor_gap >= 1:
            idx[slot_row(layout, b)] = slot_row(layout, b - predecessor_gap)
    return idx


def validate_mask(mask: np.ndarray) -> None:
    if mask.dtype != bool or mask.ndim != 2:
        raise ValueError("mask must be a 2-D boolean array")
    if not mask.any(axis=1).all():
        raise ValueError("mask has a query row with no admissible key")


# ---------------------------------------------------------------------------
# reachability
# ---------------------------------------------------------------------------


def dependency_matrix(layout: BlockLayout, layer: int, group: int = 0) -> np.ndarray:
    """Rows of the previous layer that each row of ``layer`` reads (attention plus residual)."""
    gap = layout.n_groups
    dep = contextual_mask(layout, layer, gap, group).copy()
    res = residual_index(layout, layer, gap, group)
    dep[np.arange(dep.shape[0]), res] = True
    return dep


def reach_matrix(layout: BlockLayout, n_layers: int, group: int = 0) -> np.ndarray:
    """Boolean product of the dependency matrices of layers ``n_layers .. 1``."""
    size = layout.t_prime + layout.n_blocks
    reach = np.eye(size, dtype=bool)
    for n in range(n_layers, 0, -1):
        dep = dependency_matrix(layout, n, group).astype(np.int64)
        reach = (reach.astype(np.int64) @ dep) > 0
    return reach


def reachable_frames(layout: BlockLayout, n_layers: int, b: int, context_from_input: bool = True) -> set[int]:
    """1-based input frames that block ``b``'s frame outputs can depend on after ``n_layers``.

    With ``context_from_input`` the initial context of block ``j`` is treated
    as a function of block ``j``'s frames (average or max initialisation).
    """
    return reach_by_block(layout, n_layers, context_from_input)[b]


def reach_by_block(layout: BlockLayout, n_layers: int, context_from_input: bool = True) -> dict[int, set[int]]:
    """:func:`reachable_frames` for every block, sharing one reach matrix per group."""
    out: dict[int, set[int]] = {}
    for g in range(layout.n_groups):
        reach = reach_matrix(layout, n_layers, g)
        for b in layout.blocks_in_group(g):
            rows = reach[layout.frames(b)].any(axis=0)
            frames = {int(i) + 1 for i in np.flatnonzero(rows[: layout.t_prime])}
            if context_from_input:
                for j in range(1, layout.n_blocks + 1):
                    if rows[slot_row(layout, j)]:
                        lo, hi = layout.span(j)
                        frames.update(range(lo, hi + 1))
            out[b] = frames
    return out


def expected_reach_blocks(b: int, n_layers: int, gap: int) -> list[int]:
    """Blocks ``b, b - gap, ..., b - gap*(n_layers - 1)`` that exist."""
    return [b - gap * j for j in range(n_layers) if b - gap * j >= 1]


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def to_pbm(mask: np.ndarray) -> str:
    """Plain PBM (P1) bitmap; admissible entries are black (1)."""
    validate_mask(mask)
    rows, cols = mask.shape
    lines = ["P1", f"{cols} {rows}"]
    lines += [" ".join("1" if v else "0" for v in row) for row in mask]
    return "\n".join(lines) + "\n"


def from_pbm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines() if not line.startswith("#") for t in line.split()]
    if not tokens or tokens[0] != "P1":
        raise ValueError("not a plain PBM bitmap")
    cols, rows = int(tokens[1]), int(tokens[2])
    bits = tokens[3:]
    if len(bits) == 1 and len(bits[0]) == rows * cols:
        bits = list(bits[0])
    if len(bits) != rows * cols:
        raise ValueError(f"PBM payload has {len(bits)} bits, expected {rows * cols}")
    return np.array([b == "1" for b in bits], dtype=bool).reshape(rows, cols)
