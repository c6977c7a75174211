"""Downsampling front-end and sinusoidal positional encoding.

Three front-end kinds are supported:

``conv2d``
    Two 3x3 convolutions with stride 2 over (time, feature), zero "same"
    padding, ReLU after each, then flatten and project to ``d_model``.
``subsample-project``
    Stack 4 consecutive raw frames and project to ``d_model``.
``identity``
    Project each raw frame to ``d_model``; no downsampling.

Time indices in this module are 0-based.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .numerics import glorot_uniform

KINDS = ("conv2d", "subsample-project", "identity")

# raw frames to the left/right of 4k (or k) that downsampled frame k reads
_REACH = {"conv2d": (3, 3), "subsample-project": (0, 3), "identity": (0, 0)}


def positional_encoding(pos: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ValueError("d_model must be even for the sinusoidal encoding")
    if pos < 0:
        raise ValueError("position must be non-negative")
    return pe_table(pos + 1, d_model)[pos]


def pe_table(n: int, d_model: int, start: int = 0) -> np.ndarray:
    """Rows ``start .. start+n-1`` of the encoding table."""
    if d_model % 2:
        raise ValueError("d_model must be even for the sinusoidal encoding")
    pos = np.arange(start, start + n, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((n, d_model))
    table[:, 0::2] = np.sin(pos / rate)
    table[:, 1::2] = np.cos(pos / rate)
    return table


def add_positional(u, start: int = 0) -> Tensor:
    u = ag.as_tensor(u)
    table = pe_table(u.shape[-2], u.shape[-1], start).astype(u.dtype)
    return u + table


def downsample_factor(kind: str) -> int:
    return 1 if kind == "identity" else 4


def output_length(kind: str, t: int) -> int:
    if kind == "conv2d":
        return math.ceil(math.ceil(t / 2) / 2)
    return math.ceil(t / downsample_factor(kind))


def receptive_field(kind: str, k: int, t: int | None = None) -> tuple[int, int]:
    """Inclusive raw-frame window read by downsampled frame ``k``."""
    left, right = _REACH[kind]
    c = downsample_factor(kind) * k
    lo, hi = max(c - left, 0), c + right
    if t is not None:
        hi = min(hi, t - 1)
    return lo, hi


def lookahead(kind: str) -> int:
    """Raw frames needed beyond ``factor * L`` before downsampled frame ``L-1`` exists."""
    _, right = _REACH[kind]
    return right + 1 - downsample_factor(kind)


def init_frontend(rng: np.random.Generator, kind: str, d_in: int, d_model: int,
                  channels: int | None = None, dtype=np.float64) -> dict[str, np.ndarray]:
    if kind not in KINDS:
        raise ValueError(f"unknown frontend kind {kind!r}")
    p: dict[str, np.ndarray] = {}
    if kind == "conv2d":
        c = channels or d_model
        f2 = math.ceil(math.ceil(d_in / 2) / 2)
        p["frontend.conv1.w"] = glorot_uniform(rng, 9, c, dtype)
        p["frontend.conv1.b"] = np.zeros(c, dtype)
        p["frontend.conv2.w"] = glorot_uniform(rng, 9 * c, c, dtype)
        p["frontend.conv2.b"] = np.zeros(c, dtype)
        p["frontend.proj.w"] = glorot_uniform(rng, f2 * c, d_model, dtype)
    elif kind == "subsample-project":
        p["frontend.proj.w"] = glorot_uniform(rng, 4 * d_in, d_model, dtype)
    else:
        p["frontend.proj.w"] = glorot_uniform(rng, d_in, d_model, dtype)
    p["frontend.proj.b"] = np.zeros(d_model, dtype)
    return p


def _conv_core(xp: Tensor, w, b) -> Tensor:
    """Stride-2 3x3 convolution of an already padded ``(N, Tp, Fp, Cin)`` input."""
    _, tp, fp, cin = xp.shape
    t1, f1 = (tp - 3) // 2 + 1, (fp - 3) // 2 + 1
    rows = (2 * np.arange(t1))[:, None, None, None] + np.arange(3)[None, None, :, None]
    cols = (2 * np.arange(f1))[None, :, None, None] + np.arange(3)[None, None, None, :]
    patches = xp[(slice(None), rows, cols, slice(None))]
    patches = patches.reshape(xp.shape[0], t1, f1, 9 * cin)
    return ag.relu(patches @ w + b)


def _conv_same(x: Tensor, w, b) -> Tensor:
    return _conv_core(ag.pad(x, [(0, 0), (1, 1), (1, 1), (0, 0)]), w, b)


def downsample(x, kind: str, params: Mapping[str, Tensor]) -> Tensor:
    """Map raw features ``(T, F)`` or ``(N, T, F)`` to ``(.., T', d_model)``."""
    x = ag.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    n, t, f = x.shape
    if kind != "identity" and t < 4:
        raise ValueError(f"input of {t} frames is too short for the stride-4 front-end (need >= 4)")
    if kind == "conv2d":
        h = _conv_same(x.reshape(n, t, f, 1), params["frontend.conv1.w"], params["frontend.conv1.b"])
        h = _conv_same(h, params["frontend.conv2.w"], params["frontend.conv2.b"])
        h = h.reshape(n, h.shape[1], h.shape[2] * h.shape[3])
    elif kind == "subsample-project":
        t4 = math.ceil(t / 4)
        h = ag.pad(x, [(0, 0), (0, 4 * t4 - t), (0, 0)]).reshape(n, t4, 4 * f)
    elif kind == "identity":
        h = x
    else:
        raise ValueError(f"unknown frontend kind {kind!r}")
    out = h @ params["frontend.proj.w"] + params["frontend.proj.b"]
    return out.reshape(*out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# streaming
# ---------------------------------------------------------------------------


class _StridedConvStream:
    """Incremental stride-2 "same" convolution along time.

    Output ``j`` reads inputs ``2j-1 .. 2j+1``; index -1 and indices past the
    end of the stream are zeros.
    """

    def __init__(self, w, b):
        self.w, self.b = w, b
        self.buf: list[np.ndarray] = []
        self.offset = 0  # absolute index of buf[0]
        self.n_in = 0
        self.n_out = 0

    def _row(self, i: int, total: int | None, like: np.ndarray) -> np.ndarray:
        if i < 0 or (total is not None and i >= total):
            return np.zeros_like(like)
        return self.buf[i - self.offset]

    def _emit(self, total: int | None) -> list[np.ndarray]:
        out = []
        while True:
            j = self.n_out
            if total is None:
                if 2 * j + 1 >= self.n_in:
                    break
            elif j >= math.ceil(total / 2):
                break
            like = self.buf[-1]
            win = np.stack([self._row(2 * j + d, total, like) for d in (-1, 0, 1)])
            win = np.pad(win, [(0, 0), (1, 1), (0, 0)])[None]
            out.append(_conv_core(Tensor(win), self.w, self.b).data[0, 0])
            self.n_out += 1
            keep_from = 2 * self.n_out - 1
            while self.offset < keep_from and self.buf and self.offset < self.n_in - 1:
                self.buf.pop(0)
                self.offset += 1
        return out

    def push(self, frames: list[np.ndarray]) -> list[np.ndarray]:
        self.buf.extend(frames)
        self.n_in += len(frames)
        return self._emit(None) if frames else []

    def finish(self) -> list[np.ndarray]:
        if not self.buf:
            return []
        return self._emit(self.n_in)


class StreamingFrontend:
    """Produces the same frames as :func:`downsample`, one raw chunk at a time.

    Positional encoding is not applied here.
    """

    def __init__(self, kind: str, params: Mapping[str, Tensor], d_in: int):
        if kind not in KINDS:
            raise ValueError(f"unknown frontend kind {kind!r}")
        self.kind, self.params, self.d_in = kind, params, d_in
        self.n_raw = 0
        self._pending: list[np.ndarray] = []
        if kind == "conv2d":
            self._c1 = _StridedConvStream(params["frontend.conv1.w"], params["frontend.conv1.b"])
            self._c2 = _StridedConvStream(params["frontend.conv2.w"], params["frontend.conv2.b"])

    def _project(self, rows: list[np.ndarray]) -> np.ndarray:
        w = self.params["frontend.proj.w"]
        b = self.params["frontend.proj.b"]
        if not rows:
            return np.zeros((0, w.shape[1]), dtype=w.data.dtype)
        h = np.stack([r.reshape(-1) for r in rows])
        return (Tensor(h) @ w + b).data

    def push(self, chunk: np.ndarray) -> np.ndarray:
        chunk = np.asarray(chunk)
        if chunk.ndim != 2 or chunk.shape[1] != self.d_in:
            raise ValueError(f"chunk must be (n, {self.d_in}), got {chunk.shape}")
        self.n_raw += chunk.shape[0]
        frames = list(chunk)
        if self.kind == "identity":
            return self._project(frames)
        if self.kind == "subsample-project":
            self._pending.extend(frames)
            ready = len(self._pending) // 4
            rows = [np.concatenate(self._pending[4 * i:4 * i + 4]) for i in range(ready)]
            self._pending = self._pending[4 * ready:]
            return self._project(rows)
        l1 = self._c1.push([f[:, None] for f in frames])
        return self._project(self._c2.push(l1))

    def finish(self) -> np.ndarray:
        if self.kind != "identity" and self.n_raw < 4:
            raise ValueError(f"input of {self.n_raw} frames is too short for the stride-4 front-end (need >= 4)")
        if self.kind == "identity":
            return self._project([])
        if self.kind == "subsample-project":
            rows = []
            if self._pending:
                pad = [np.zeros_like(self._pending[0])] * (4 - len(self._pending))
                rows = [np.concatenate(self._pending + pad)]
            self._pending = []
            return self._project(rows)
        l1 = self._c1.finish()
        rows = self._c2.push(l1) + self._c2.finish()
        return self._project(rows)
