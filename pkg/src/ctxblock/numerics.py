"""Dense kernels shared by the whole encoder.

Every function here is a pure function of numpy arrays.  The reverse-mode
engine in :mod:`ctxblock.autograd` calls the same forward kernels and the
``*_backward`` companions defined below, so the model and its gradient
share one definition of each primitive.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPES = {"float64": np.float64, "float32": np.float32}


class NumericError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


def resolve_dtype(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None


def layer_norm_eps(dtype) -> float:
    return 1e-12 if np.dtype(dtype) == np.float64 else 1e-5


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def masked_softmax_rows(scores: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis restricted to admissible entries.

    ``mask`` is boolean and broadcastable to ``scores``; ``True`` marks an
    admissible key.  Inadmissible entries are excluded before the max
    subtraction and come out as exact zeros, so their score values never
    influence the result.
    """
    scores = np.asarray(scores)
    if mask is None:
        shifted = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask has a row with no admissible key")
    neg = np.array(-np.inf, dtype=scores.dtype)
    s = np.where(mask, scores, neg)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    # exp(-inf) is already 0; the where keeps the zero exact even for -0.0
    e = np.where(mask, e, 0.0).astype(scores.dtype, copy=False)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # masked entries have prob 0, so they receive exactly zero gradient
    inner = (grad_out * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Normalize each frame (last axis) to zero mean and unit variance, then scale and shift.

    Frames never share statistics.
    """
    x = np.asarray(x)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError(f"layer_norm gain/bias length must be {x.shape[-1]}")
    xhat, _ = _normalize(x, layer_norm_eps(x.dtype) if eps is None else eps)
    return xhat * gain + bias


def _normalize(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def layer_norm_backward(x, gain, grad_out, eps):
    """Gradients of :func:`layer_norm` w.r.t. (x, gain, bias), per frame."""
    xhat, inv = _normalize(x, eps)
    g = grad_out * gain
    dx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    lead = tuple(range(x.ndim - 1))
    dgain = (grad_out * xhat).sum(axis=lead)
    dbias = grad_out.sum(axis=lead)
    return dx, dgain, dbias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def ffn(x, w1, v1, w2, v2) -> np.ndarray:
    """Position-wise feed-forward ``max(0, x W1 + v1) W2 + v2``."""
    if w1.shape[0] != x.shape[-1] or w2.shape[0] != w1.shape[1] or w2.shape[1] != x.shape[-1]:
        raise ValueError(
            f"ffn shape chain broken: x{x.shape} w1{w1.shape} w2{w2.shape}"
        )
    return relu(x @ w1 + v1) @ w2 + v2


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class ParamSet(Mapping[str, np.ndarray]):
    """Immutable ordered mapping of parameter name to array.

    Iteration order is insertion order, which the model builders keep
    deterministic.  Arrays are marked read-only; use :meth:`replace` to get
    an updated copy.
    """

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] | Mapping[str, np.ndarray] = ()):
        if isinstance(items, Mapping):
            items = items.items()
        data: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in items:
            a = np.array(arr, copy=True)
            a.setflags(write=False)
            data[name] = a
        self._data = data

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self):
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamSet({shapes})"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._data.items()}

    def replace(self, **updates: np.ndarray) -> "ParamSet":
        unknown = set(updates) - set(self._data)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        return ParamSet((k, updates.get(k, v)) for k, v in self._data.items())

    def merged(self, other: Mapping[str, np.ndarray]) -> "ParamSet":
        items = list(self._data.items())
        for k, v in other.items():
            if k in self._data:
                raise KeyError(f"duplicate parameter {k!r}")
            items.append((k, v))
        return ParamSet(items)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet((k, v.astype(dtype)) for k, v in self._data.items())

    def num_params(self) -> int:
        return int(sum(v.size for v in self._data.values()))


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: dict[str, float]
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def grad_check(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    grad_fn: Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]],
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences ``(f(x+e) - f(x-e)) / 2e``.

    The error for each named input is ``||g_a - g_n|| / max(||g_a|| + ||g_n||, floor)``
    over the checked entries; the report carries the maximum over inputs.
    ``max_entries`` limits the number of perturbed entries per input, picked
    at random with ``rng``.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    analytic = grad_fn(inputs)
    per_input: dict[str, float] = {}
    n_checked = 0
    for name, value in inputs.items():
        ga = np.asarray(analytic[name], dtype=np.float64)
        if ga.shape != value.shape:
            raise ValueError(f"gradient for {name!r} has shape {ga.shape}, expected {value.shape}")
        check_finite(ga, f"analytic gradient of {name}")
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat_idx = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        gn = np.zeros(flat_idx.size)
        for j, i in enumerate(flat_idx):
            idx = np.unravel_index(i, value.shape)
            orig = value[idx]
            value[idx] = orig + eps
            fp = loss_fn(inputs)
            value[idx] = orig - eps
            fm = loss_fn(inputs)
            value[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {name}{idx}")
            gn[j] = (fp - fm) / (2 * eps)
        ga_sel = ga.reshape(-1)[flat_idx]
        denom = max(np.linalg.norm(ga_sel) + np.linalg.norm(gn), floor)
        per_input[name] = float(np.linalg.norm(ga_sel - gn) / denom)
        n_checked += flat_idx.size
    return GradCheckReport(max(per_input.values(), default=0.0), per_input, n_checked)
