"""Encoder stacks in batch, naive block and contextual block modes.

Two routes compute the block modes:

* :func:`encode_masked_block` runs every layer over the whole (extended)
  sequence at once, confining attention with per-layer masks.  This is the
  training path and is differentiable end to end.
* :class:`StreamingEncoder` consumes raw frames chunk by chunk, encodes each
  block as soon as its frames have arrived and carries the context vectors
  forward in a :class:`~ctxblock.context.ContextState`.

Both must agree to within floating-point noise.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autograd as ag
from . import frontend as fe
from .attention import multi_head
from .autograd import Tensor
from .blocking import BlockLayout, build_extended, make_layout
from .context import ContextInitMode, ContextState, LayerParams, ffn_residual, init_context, layer_forward
from .masks import contextual_masks, naive_block_mask, residual_index, slot_row
from .numerics import NumericError, ParamSet, check_finite, glorot_uniform, resolve_dtype

MODES = ("batch", "block", "contextual")


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    block_size: int = 8
    hop_size: int = 8
    mode: str = "contextual"
    context_init: str = "pe+avg"
    frontend: str = "identity"
    d_in: int = 16
    conv_channels: int | None = None
    precision: str = "float64"
    seed: int = 0
    capture_attention: bool = False
    tolerance: float = 1e-10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model < 2 or self.d_model % 2:
            raise ValueError("d_model must be a positive even number")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_ff < 1 or self.d_in < 1:
            raise ValueError("d_ff and d_in must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.frontend not in fe.KINDS:
            raise ValueError(f"frontend must be one of {fe.KINDS}, got {self.frontend!r}")
        ContextInitMode(self.context_init)
        resolve_dtype(self.precision)
        if not 1 <= self.hop_size <= self.block_size:
            raise ValueError("need 1 <= hop_size <= block_size")
        if self.mode == "contextual" and self.hop_size not in (self.block_size, self.block_size / 2):
            raise ValueError("contextual mode needs hop_size == block_size or hop_size == block_size / 2")

    @property
    def gap(self) -> int:
        """Predecessor distance for context inheritance (2 under half overlap)."""
        return math.ceil(self.block_size / self.hop_size)

    @property
    def dtype(self) -> np.dtype:
        return resolve_dtype(self.precision)

    def replace(self, **kw) -> "EncoderConfig":
        d = asdict(self)
        d.update(kw)
        return EncoderConfig(**d)

    def shape_hash(self) -> str:
        """Hash of the fields that decide parameter shapes."""
        keys = ("n_layers", "d_model", "n_heads", "d_ff", "frontend", "d_in", "conv_channels")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EncoderOutput:
    h: np.ndarray
    layout: BlockLayout | None = None
    # per group, per layer: weights of shape (m, rows, keys) (batch axis dropped)
    attention: list[list[np.ndarray]] | None = None
    extras: dict = field(default_factory=dict)


def init_params(cfg: EncoderConfig, seed: int | None = None) -> ParamSet:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.dtype
    d, f = cfg.d_model, cfg.d_ff
    items = list(fe.init_frontend(rng, cfg.frontend, cfg.d_in, d, cfg.conv_channels, dt).items())
    for n in range(1, cfg.n_layers + 1):
        p = f"layer{n}."
        items += [
            (p + "ln1.g", np.ones(d, dt)), (p + "ln1.b", np.zeros(d, dt)),
            (p + "wq", glorot_uniform(rng, d, d, dt)),
            (p + "wk", glorot_uniform(rng, d, d, dt)),
            (p + "wv", glorot_uniform(rng, d, d, dt)),
            (p + "wo", glorot_uniform(rng, d, d, dt)),
            (p + "ln2.g", np.ones(d, dt)), (p + "ln2.b", np.zeros(d, dt)),
            (p + "ffn.w1", glorot_uniform(rng, d, f, dt)), (p + "ffn.v1", np.zeros(f, dt)),
            (p + "ffn.w2", glorot_uniform(rng, f, d, dt)), (p + "ffn.v2", np.zeros(d, dt)),
        ]
    items += [("final_ln.g", np.ones(d, dt)), ("final_ln.b", np.zeros(d, dt))]
    return ParamSet(items)


def as_tensors(params: Mapping[str, np.ndarray], dtype=None, requires_grad: bool = False) -> dict[str, Tensor]:
    out = {}
    for k, v in params.items():
        if isinstance(v, Tensor):
            out[k] = v
            continue
        arr = np.array(v, dtype=dtype if dtype is not None else v.dtype)
        out[k] = Tensor(arr, requires_grad=requires_grad, name=k)
    return out


def _layers(cfg: EncoderConfig, t: Mapping[str, Tensor]) -> list[LayerParams]:
    return [LayerParams.from_tensors(t, n, cfg.n_heads) for n in range(1, cfg.n_layers + 1)]


def _masked_layer(x: Tensor, lp: LayerParams, mask, res: np.ndarray | None):
    xn = ag.layer_norm(x, lp.ln1_g, lp.ln1_b)
    att, weights = multi_head(xn, xn, xn, lp.mha, mask)
    if res is None or np.array_equal(res, np.arange(x.shape[-2])):
        residual = x
    else:
        residual = ag.take(x, res, axis=-2)
    return ffn_residual(att + residual, lp), weights


def _final(x: Tensor, t: Mapping[str, Tensor]) -> Tensor:
    return ag.layer_norm(x, t["final_ln.g"], t["final_ln.b"])


def frontend_forward(x, cfg: EncoderConfig, t: Mapping[str, Tensor]) -> Tensor:
    x = ag.as_tensor(np.asarray(x, dtype=cfg.dtype)) if not isinstance(x, Tensor) else x
    if x.shape[-1] != cfg.d_in:
        raise ValueError(f"features have {x.shape[-1]} dims, config expects d_in={cfg.d_in}")
    return fe.add_positional(fe.downsample(x, cfg.frontend, t))


def initial_contexts(u: Tensor, layout: BlockLayout, mode) -> Tensor:
    """``(..., B, d)`` stack of the initial context vectors of every block."""
    rows = []
    lead = (slice(None),) * (u.ndim - 2)
    for b in range(1, layout.n_blocks + 1):
        c = init_context(u[lead + (layout.frames(b),)], b, mode)
        rows.append(c.reshape(*c.shape[:-1], 1, c.shape[-1]))
    return ag.concat(rows, axis=-2)


def _assemble(group_outputs: list[Tensor], layout: BlockLayout) -> Tensor:
    """Pick each frame from the pass of the group that owns it."""
    if len(group_outputs) == 1:
        return group_outputs[0]
    stacked = ag.concat(group_outputs, axis=-2)
    owner_group = np.array([layout.group(b) for b in layout.owner])
    idx = owner_group * layout.t_prime + np.arange(layout.t_prime)
    return ag.take(stacked, idx, axis=-2)


def forward(x, cfg: EncoderConfig, t: Mapping[str, Tensor], capture: bool = False,
            context_keys: bool = True, mode: str | None = None):
    """Differentiable masked-path forward.

    ``x`` is ``(T, d_in)`` or ``(N, T, d_in)``.  Returns ``(h, layout, captures)``
    where ``captures[g][n]`` holds layer ``n+1``'s attention weights of group
    pass ``g`` when ``capture`` is set.
    """
    mode = mode or cfg.mode
    u = frontend_forward(x, cfg, t)
    layers = _layers(cfg, t)
    t_prime = u.shape[-2]
    captures: list[list[np.ndarray]] = []

    if mode == "batch":
        h = u
        caps = []
        for lp in layers:
            h, w = _masked_layer(h, lp, None, None)
            caps.append(w.data)
        if capture:
            captures.append(caps)
        return _final(h, t), None, captures

    layout = make_layout(t_prime, cfg.block_size, cfg.hop_size)
    outs = []
    if mode == "block":
        for g, mask in enumerate(naive_block_mask(layout)):
            h = u
            caps = []
            for lp in layers:
                h, w = _masked_layer(h, lp, mask, None)
                caps.append(w.data)
            captures.append(caps)
            outs.append(_final(h, t))
    elif mode == "contextual":
        c0 = initial_contexts(u, layout, cfg.context_init)
        gap = layout.n_groups
        lead = (slice(None),) * (u.ndim - 2)
        for g in range(layout.n_groups):
            h = build_extended(u, c0, layout.n_blocks)
            masks = contextual_masks(layout, cfg.n_layers, g, context_keys)
            caps = []
            for n, (lp, mask) in enumerate(zip(layers, masks), start=1):
                h, w = _masked_layer(h, lp, mask, residual_index(layout, n, gap, g))
                caps.append(w.data)
            captures.append(caps)
            outs.append(_final(h[lead + (slice(0, t_prime),)], t))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _assemble(outs, layout), layout, captures if capture else []


def _strip_batch(caps: list[list[np.ndarray]]) -> list[list[np.ndarray]]:
    return [[w[0] if w.ndim == 4 else w for w in group] for group in caps]


def encode_batch(x, cfg: EncoderConfig, params: Mapping[str, np.ndarray]) -> EncoderOutput:
    """Full-sequence encoder: front-end, ``N_e`` unmasked pre-norm layers, final norm."""
    t = as_tensors(params, cfg.dtype)
    h, _, caps = forward(x, cfg, t, capture=cfg.capture_attention, mode="batch")
    check_finite(h.data, "encoder output")
    return EncoderOutput(h.data, None, _strip_batch(caps) if cfg.capture_attention else None)


def encode_masked_block(x, cfg: EncoderConfig, params: Mapping[str, np.ndarray],
                        context_keys: bool = True) -> EncoderOutput:
    """Single parallel pass per block group under block masks.

    ``context_keys=False`` keeps the extended sequence but hides every
    context column from frame queries.
    """
    if cfg.mode not in ("block", "contextual"):
        raise ValueError("encode_masked_block needs mode 'block' or 'contextual'")
    t = as_tensors(params, cfg.dtype)
    h, layout, caps = forward(x, cfg, t, capture=cfg.capture_attention, context_keys=context_keys)
    check_finite(h.data, "encoder output")
    return EncoderOutput(h.data, layout, _strip_batch(caps) if cfg.capture_attention else None)


def encode(x, cfg: EncoderConfig, params: Mapping[str, np.ndarray]) -> EncoderOutput:
    if cfg.mode == "batch":
        return encode_batch(x, cfg, params)
    return encode_masked_block(x, cfg, params)


# ---------------------------------------------------------------------------
# streaming
# ---------------------------------------------------------------------------


class StreamingEncoder:
    """Single-owner streaming session for ``block`` or ``contextual`` mode.

    Feed raw frames with :meth:`push`; each call returns the encoded frames
    that became final.  :meth:`finish` signals end of stream and returns the
    rest.  Concatenating all returned arrays gives the full ``h``.
    """

    def __init__(self, cfg: EncoderConfig, params: Mapping[str, np.ndarray]):
        if cfg.mode not in ("block", "contextual"):
            raise ValueError("streaming needs mode 'block' or 'contextual'")
        self.cfg = cfg
        self._t = as_tensors(params, cfg.dtype)
        self._layers = _layers(cfg, self._t)
        self._frontend = fe.StreamingFrontend(cfg.frontend, self._t, cfg.d_in)
        self._u: list[np.ndarray] = []
        self._next_block = 1
        self._emitted = 0
        self._outputs: dict[int, np.ndarray] = {}
        self._finished = False
        self.state = ContextState(cfg.n_layers, cfg.gap) if cfg.mode == "contextual" else None
        self.n_raw = 0
        self.first_emit_raw: int | None = None
        self.blocks_processed = 0

    # -- internals ----------------------------------------------------------

    def _add_frames(self, rows: np.ndarray) -> None:
        if rows.shape[0] == 0:
            return
        start = len(self._u)
        rows = rows + fe.pe_table(rows.shape[0], self.cfg.d_model, start).astype(rows.dtype)
        self._u.extend(rows)

    def _block_span(self, b: int, t_prime: int | None) -> tuple[int, int]:
        start = (b - 1) * self.cfg.hop_size + 1
        end = start + self.cfg.block_size - 1
        return start, end if t_prime is None else min(end, t_prime)

    def _encode_block(self, b: int, lo: int, hi: int) -> np.ndarray:
        z = Tensor(np.stack(self._u[lo - 1:hi]))
        if self.state is None:
            for lp in self._layers:
                z, _ = layer_forward(z, None, None, lp)
        else:
            c = init_context(z, b, self.cfg.context_init)
            contexts = [c.data]
            for n, lp in enumerate(self._layers, start=1):
                if n == 1:
                    c_kv = c
                else:
                    prev = self.state.predecessor(n - 1)
                    c_kv = None if prev is None else Tensor(prev)
                z, c = layer_forward(z, c, c_kv, lp)
                if n < self.cfg.n_layers:
                    contexts.append(c.data)
            self.state.push(contexts[: self.cfg.n_layers] if self.cfg.n_layers else [])
        h = _final(z, self._t).data
        check_finite(h, f"block {b} output")
        self.blocks_processed += 1
        return h

    def _run_ready_blocks(self) -> list[np.ndarray]:
        out = []
        off = (self.cfg.block_size - self.cfg.hop_size) // 2
        while True:
            b = self._next_block
            lo, hi = self._block_span(b, None)
            if hi > len(self._u):
                break
            h = self._encode_block(b, lo, hi)
            self._outputs = {b: h}
            self._next_block += 1
            until = lo + off + self.cfg.hop_size - 1
            if until > self._emitted:
                out.append(h[self._emitted + 1 - lo: until + 1 - lo])
                self._emitted = until
        return out

    def _collect(self, parts: list[np.ndarray]) -> np.ndarray:
        if not parts:
            return np.zeros((0, self.cfg.d_model), dtype=self.cfg.dtype)
        res = np.concatenate(parts)
        if res.shape[0] and self.first_emit_raw is None:
            self.first_emit_raw = self.n_raw
        return res

    # -- public API ---------------------------------------------------------

    def push(self, chunk: np.ndarray) -> np.ndarray:
        if self._finished:
            raise RuntimeError("input after end of stream")
        chunk = np.asarray(chunk, dtype=self.cfg.dtype)
        if chunk.ndim == 1:
            chunk = chunk[None]
        self.n_raw += chunk.shape[0]
        self._add_frames(self._frontend.push(chunk))
        return self._collect(self._run_ready_blocks())

    def finish(self) -> np.ndarray:
        if self._finished:
            raise RuntimeError("stream already finished")
        self._finished = True
        self._add_frames(self._frontend.finish())
        t_prime = len(self._u)
        if t_prime == 0:
            raise ValueError("empty stream")
        layout = make_layout(t_prime, self.cfg.block_size, self.cfg.hop_size)
        parts = self._run_ready_blocks()
        outputs = dict(self._outputs)
        for b in range(self._next_block, layout.n_blocks + 1):
            lo, hi = layout.span(b)
            outputs[b] = self._encode_block(b, lo, hi)
        self._next_block = layout.n_blocks + 1
        for b, (lo, hi) in enumerate(layout.owned, start=1):
            lo = max(lo, self._emitted + 1)
            if hi < lo:
                continue
            if b not in outputs:
                raise AssertionError(f"frames {lo}-{hi} belong to block {b}, whose output was dropped")
            blo = layout.span(b)[0]
            parts.append(outputs[b][lo - blo: hi - blo + 1])
            self._emitted = hi
        self.layout = layout
        return self._collect(parts)

    def corrupt_context(self, scale: float = 1.0, seed: int = 0) -> None:
        """Test hook: perturb the carried context vectors."""
        if self.state is None:
            raise ValueError("no context state in block mode")
        self.state.perturb(np.random.default_rng(seed), scale)


def encode_streaming(feed: Iterable[np.ndarray], cfg: EncoderConfig,
                     params: Mapping[str, np.ndarray]) -> list[np.ndarray]:
    """Run a whole stream; returns one emitted array per chunk plus the final flush."""
    session = StreamingEncoder(cfg, params)
    out = [session.push(chunk) for chunk in feed]
    out.append(session.finish())
    return out


def chunked(x: np.ndarray, size: int) -> list[np.ndarray]:
    return [x[i:i + size] for i in range(0, x.shape[0], size)]


# ---------------------------------------------------------------------------
# attention statistics and cost model
# ---------------------------------------------------------------------------


@dataclass
class AttentionStats:
    """Per (layer, head) attention mass split into frame keys and the context key.

    ``frame_mass[n, i, r]`` is the mean over frame queries of the weight on
    the frame key at relative offset ``rel_positions[r]``;
    ``context_mass[n, i]`` the mean weight on the context key.
    ``context_mass_by_block[n, i, b-1]`` restricts the mean to block ``b``.
    ``query_totals`` has the per-query sums (frame + context) for checking.
    """

    rel_positions: np.ndarray
    frame_mass: np.ndarray
    context_mass: np.ndarray
    context_mass_by_block: np.ndarray
    query_totals: np.ndarray


def attention_stats(x, cfg: EncoderConfig, params: Mapping[str, np.ndarray]) -> AttentionStats:
    if cfg.mode != "contextual":
        raise ValueError("attention statistics need mode 'contextual'")
    if not cfg.capture_attention:
        raise ValueError("attention capture is disabled (capture_attention=False)")
    x = np.asarray(x, dtype=cfg.dtype)
    if x.ndim == 2:
        x = x[None]
    t = as_tensors(params, cfg.dtype)
    _, layout, caps = forward(x, cfg, t, capture=True)
    L, m = cfg.block_size, cfg.n_heads
    rel = np.arange(-(L - 1), L)
    n_layers, nb = cfg.n_layers, layout.n_blocks
    frame_sum = np.zeros((n_layers, m, rel.size))
    ctx_sum = np.zeros((n_layers, m))
    ctx_block_sum = np.zeros((n_layers, m, nb))
    block_rows = np.zeros(nb)
    totals = []
    slots = slice(layout.t_prime, layout.t_prime + nb)
    for g, group_caps in enumerate(caps):
        for b in layout.blocks_in_group(g):
            fr = layout.frames(b)
            q_idx = np.arange(fr.start, fr.stop)
            block_rows[b - 1] += len(q_idx) * x.shape[0]
            for n, w in enumerate(group_caps):
                wq = w[:, :, fr, :]  # (N, m, rows, keys)
                ctx = wq[..., slots].sum(axis=-1)
                ctx_sum[n] += ctx.sum(axis=(0, 2))
                ctx_block_sum[n, :, b - 1] += ctx.sum(axis=(0, 2))
                fw = wq[..., fr]
                offsets = q_idx[None, :] * 0 + np.arange(fr.start, fr.stop)[None, :] - q_idx[:, None]
                for qi in range(len(q_idx)):
                    np.add.at(frame_sum[n], (slice(None), offsets[qi] + L - 1), fw[:, :, qi, :].sum(axis=0))
                totals.append(fw.sum(axis=-1) + ctx)
    n_rows = block_rows.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        by_block = np.where(block_rows > 0, ctx_block_sum / np.maximum(block_rows, 1), 0.0)
    return AttentionStats(
        rel_positions=rel,
        frame_mass=frame_sum / n_rows,
        context_mass=ctx_sum / n_rows,
        context_mass_by_block=by_block,
        query_totals=np.concatenate([a.reshape(-1) for a in totals]),
    )


def analytic_attention_flops(cfg: EncoderConfig, t_prime: int, path: str = "streaming") -> int:
    """Exact attention-core FLOP count of one forward pass.

    ``path="streaming"`` counts the block-by-block computation (the only
    route for batch mode is the full sequence); ``path="masked"`` counts the
    dense masked passes.
    """
    per_pair = 4 * cfg.d_model  # two matmuls, multiply-add = 2 FLOPs, summed over heads
    if cfg.mode == "batch":
        return cfg.n_layers * per_pair * t_prime * t_prime
    layout = make_layout(t_prime, cfg.block_size, cfg.hop_size)
    if path == "masked":
        size = t_prime + (layout.n_blocks if cfg.mode == "contextual" else 0)
        return layout.n_groups * cfg.n_layers * per_pair * size * size
    total = 0
    for b in range(1, layout.n_blocks + 1):
        lo, hi = layout.span(b)
        n = hi - lo + 1
        if cfg.mode == "block":
            total += cfg.n_layers * n * n
            continue
        for layer in range(1, cfg.n_layers + 1):
            keys = n + (1 if layer == 1 or b - cfg.gap >= 1 else 0)
            total += (n + 1) * keys
    return per_pair * total


def first_emission_raw_frames(cfg: EncoderConfig) -> int:
    """Raw frames that must arrive before the first block can be emitted."""
    factor = fe.downsample_factor(cfg.frontend)
    return factor * cfg.block_size + fe.lookahead(cfg.frontend)


__all__ = [
    "AttentionStats", "EncoderConfig", "EncoderOutput", "NumericError", "StreamingEncoder",
    "analytic_attention_flops", "as_tensors", "attention_stats", "chunked", "encode",
    "encode_batch", "encode_masked_block", "encode_streaming", "first_emission_raw_frames",
    "forward", "init_params", "initial_contexts", "slot_row",
]
