"""Synthetic global-flag task and a small Adam/Noam training loop.

Each sequence carries a binary flag that is visible only in the frames of
the first block (as an additive offset).  Every frame's label is its local
pattern id XOR the flag, so outside the first block the label can only be
recovered by a model that moves information across blocks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .encoder import EncoderConfig, as_tensors, forward, init_params
from .blocking import make_layout
from .numerics import NumericError, ParamSet, glorot_uniform


@dataclass(frozen=True)
class SyntheticTask:
    t_prime: int = 32
    d_in: int = 16
    n_patterns: int = 4
    flag_frames: int = 8
    use_flag: bool = True
    noise: float = 0.5
    flag_scale: float = 1.0
    embed_seed: int = 1234

    def __post_init__(self):
        if self.use_flag and (self.n_patterns < 2 or self.n_patterns % 2):
            raise ValueError("the flag task needs an even number of patterns >= 2")
        if self.n_patterns < 1:
            raise ValueError("need at least one pattern")
        if not 1 <= self.flag_frames <= self.t_prime:
            raise ValueError("flag_frames must lie within the sequence")

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.embed_seed)
        patterns = rng.standard_normal((self.n_patterns, self.d_in))
        flag_vec = rng.standard_normal(self.d_in)
        flag_vec *= self.flag_scale * math.sqrt(self.d_in) / np.linalg.norm(flag_vec)
        return patterns, flag_vec


@dataclass
class Dataset:
    x: np.ndarray  # (n, T, d_in)
    labels: np.ndarray  # (n, T)
    patterns: np.ndarray  # (n, T)
    flags: np.ndarray  # (n,)

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.labels[idx], self.patterns[idx], self.flags[idx])


def gen_synthetic(seed: int, task: SyntheticTask, n: int, flags: np.ndarray | None = None) -> Dataset:
    """Deterministic dataset of ``n`` sequences.

    ``flags`` overrides the random flags (used to build matched pairs).
    """
    rng = np.random.default_rng(seed)
    emb, flag_vec = task.embeddings()
    pat = rng.integers(0, task.n_patterns, size=(n, task.t_prime))
    noise = task.noise * rng.standard_normal((n, task.t_prime, task.d_in))
    drawn = rng.integers(0, 2, size=n)
    if not task.use_flag:
        drawn[:] = 0
    if flags is not None:
        drawn = np.asarray(flags, dtype=int)
    x = emb[pat] + noise
    x[:, : task.flag_frames] += drawn[:, None, None] * flag_vec
    labels = pat ^ drawn[:, None] if task.use_flag else pat.copy()
    return Dataset(x, labels, pat, drawn)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    warmup_steps: int = 200
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    n_train: int = 2000
    n_valid: int = 500
    seed: int = 0


def noam_lr(step: int, d_model: int, warmup: int, scale: float) -> float:
    """``scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``, steps counted from 1."""
    step = max(step, 1)
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def init_head(enc_cfg: EncoderConfig, n_classes: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed + 7919)
    return {
        "head.w": glorot_uniform(rng, enc_cfg.d_model, n_classes, enc_cfg.dtype),
        "head.b": np.zeros(n_classes, enc_cfg.dtype),
    }


def model_logits(x, enc_cfg: EncoderConfig, t):
    h, layout, _ = forward(x, enc_cfg, t)
    return h @ t["head.w"] + t["head.b"]


def loss_and_grads(params: ParamSet, enc_cfg: EncoderConfig, x, labels):
    t = as_tensors(params, requires_grad=True)
    loss = ag.softmax_cross_entropy(model_logits(x, enc_cfg, t), labels)
    loss.backward()
    return float(loss.data), {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in t.items()}


def dataset_loss(params: ParamSet, enc_cfg: EncoderConfig, data: Dataset, batch: int = 250) -> float:
    t = as_tensors(params)
    total = 0.0
    for i in range(0, len(data), batch):
        xb, yb = data.x[i:i + batch], data.labels[i:i + batch]
        total += float(ag.softmax_cross_entropy(model_logits(xb, enc_cfg, t), yb).data) * len(xb)
    return total / len(data)


@dataclass
class TrainResult:
    params: ParamSet
    curve: list[dict] = field(default_factory=list)
    diverged: bool = False
    message: str = ""


class Adam:
    def __init__(self, params: ParamSet, beta1: float, beta2: float, eps: float):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: ParamSet, grads: dict[str, np.ndarray], lr: float) -> ParamSet:
        self.t += 1
        new = {}
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            new[k] = p - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return ParamSet(new)


def train(cfg: TrainConfig, enc_cfg: EncoderConfig, train_data: Dataset, valid_data: Dataset | None = None,
          n_classes: int | None = None, log=None) -> TrainResult:
    """Frame-wise cross-entropy training of encoder + linear head.

    The curve holds one row per epoch (epoch 0 is the untrained model).  A
    non-finite loss stops training and is reported in the result.
    """
    n_classes = n_classes or int(train_data.labels.max()) + 1
    params = init_params(enc_cfg, seed=cfg.seed).merged(init_head(enc_cfg, n_classes, cfg.seed))
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed + 1)
    result = TrainResult(params)

    def record(epoch, train_loss):
        row = {"epoch": epoch, "train_loss": train_loss,
               "valid_loss": dataset_loss(params, enc_cfg, valid_data) if valid_data is not None else float("nan")}
        result.curve.append(row)
        if log:
            log(row)

    record(0, dataset_loss(params, enc_cfg, train_data))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_data))
        seen, total = 0, 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss, grads = loss_and_grads(params, enc_cfg, train_data.x[idx], train_data.labels[idx])
            if not math.isfinite(loss):
                result.diverged = True
                result.message = f"non-finite loss at epoch {epoch}, step {step + 1}"
                result.params = params
                return result
            step += 1
            lr = noam_lr(step, enc_cfg.d_model, cfg.warmup_steps, cfg.lr_scale)
            if lr:
                params = opt.step(params, grads, lr)
            total += loss * len(idx)
            seen += len(idx)
        record(epoch, total / seen)
    result.params = params
    return result


def predict(params: ParamSet, enc_cfg: EncoderConfig, x: np.ndarray, batch: int = 250) -> np.ndarray:
    t = as_tensors(params)
    out = []
    for i in range(0, x.shape[0], batch):
        out.append(model_logits(x[i:i + batch], enc_cfg, t).data.argmax(axis=-1))
    return np.concatenate(out)


def evaluate(params: ParamSet, enc_cfg: EncoderConfig, data: Dataset, flag_shift: int = 1) -> dict:
    """Frame accuracy overall, per owning block, and on blocks >= 2.

    ``pattern_accuracy`` scores only the flag-independent part of the label
    (correct up to the flag flip); ``late_accuracy`` is the flag-dependent
    accuracy over frames owned by blocks 2 and later.
    """
    pred = predict(params, enc_cfg, data.x)
    t_prime = data.labels.shape[1]
    layout = make_layout(t_prime, enc_cfg.block_size, enc_cfg.hop_size)
    owner = layout.owner
    correct = pred == data.labels
    pattern_ok = (pred == data.labels) | (pred == (data.labels ^ flag_shift))
    per_block = {int(b): float(correct[:, owner == b].mean()) for b in np.unique(owner)}
    late = owner >= 2
    return {
        "accuracy": float(correct.mean()),
        "late_accuracy": float(correct[:, late].mean()) if late.any() else float("nan"),
        "pattern_accuracy": float(pattern_ok.mean()),
        "per_block": per_block,
    }


def default_encoder_config(mode: str, **kw) -> EncoderConfig:
    base = dict(n_layers=4, d_model=32, n_heads=4, d_ff=64, block_size=8, hop_size=8,
                mode=mode, context_init="pe+avg", frontend="identity", d_in=16)
    base.update(kw)
    return EncoderConfig(**base)


def run_experiment(mode: str, seed: int, task: SyntheticTask, tcfg: TrainConfig,
                   enc_kw: dict | None = None, log=None) -> dict:
    """Train one mode on one seed; returns curve, metrics and trained params."""
    enc_cfg = default_encoder_config(mode, **(enc_kw or {}))
    tcfg = TrainConfig(**{**asdict(tcfg), "seed": seed})
    train_data = gen_synthetic(1000 * seed + 1, task, tcfg.n_train)
    valid_data = gen_synthetic(1000 * seed + 2, task, tcfg.n_valid)
    res = train(tcfg, enc_cfg, train_data, valid_data, n_classes=task.n_patterns, log=log)
    if res.diverged:
        raise NumericError(f"{mode} seed {seed}: {res.message}")
    metrics = evaluate(res.params, enc_cfg, valid_data)
    return {"mode": mode, "seed": seed, "enc_cfg": enc_cfg, "curve": res.curve,
            "metrics": metrics, "params": res.params, "valid": valid_data}


def separation_verdict(late_acc: dict[str, list[float]], margin: float = 0.25,
                       chance: float = 0.5, chance_tol: float = 0.1, batch_tol: float = 0.1) -> dict:
    """Median-over-seeds comparison of flag-dependent accuracy on blocks >= 2."""
    med = {m: float(np.median(v)) for m, v in late_acc.items()}
    checks = {
        "contextual_minus_block": med["contextual"] - med["block"] >= margin,
        "block_near_chance": abs(med["block"] - chance) <= chance_tol,
    }
    if "batch" in med:
        checks["contextual_near_batch"] = med["contextual"] >= med["batch"] - batch_tol
    return {"medians": med, "checks": checks, "passed": all(checks.values())}
