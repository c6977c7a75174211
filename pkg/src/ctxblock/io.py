"""Feature files, run configs and parameter archives."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, init_params
from .numerics import ParamSet
from .toytrain import SyntheticTask, TrainConfig

MAGIC = b"FEAT"  # 0x46454154 read as a big-endian word
VERSION = 1
_HEADER = struct.Struct("<III")  # version, T, d
HEADER_BYTES = len(MAGIC) + _HEADER.size


class BadInput(ValueError):
    """Malformed file or config; maps to exit code 2."""


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_features(path, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.ndim != 2:
        raise BadInput(f"feature matrix must be 2-D, got shape {x.shape}")
    t, d = x.shape
    payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
    Path(path).write_bytes(MAGIC + _HEADER.pack(VERSION, t, d) + payload)


def parse_features(blob: bytes) -> np.ndarray:
    if len(blob) < HEADER_BYTES:
        raise BadInput(f"feature file header needs {HEADER_BYTES} bytes, got {len(blob)} "
                       f"({HEADER_BYTES - len(blob)} bytes short)")
    if blob[:4] != MAGIC:
        raise BadInput(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, t, d = _HEADER.unpack_from(blob, 4)
    if version != VERSION:
        raise BadInput(f"unsupported feature file version {version}")
    want = 4 * t * d
    got = len(blob) - HEADER_BYTES
    if got < want:
        raise BadInput(f"truncated feature file: T={t}, d={d} needs {want} payload bytes, "
                       f"got {got} ({want - got} bytes missing)")
    if got > want:
        raise BadInput(f"feature file has {got - want} trailing bytes after the {want}-byte payload")
    return np.frombuffer(blob, dtype="<f4", count=t * d, offset=HEADER_BYTES).reshape(t, d).astype(np.float32)


def read_features_csv(path) -> np.ndarray:
    """Text fixtures: a ``T,d`` header line followed by ``T`` rows of ``d`` values."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise BadInput(f"{path}: empty CSV")
    try:
        t, d = (int(v) for v in rows[0])
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise BadInput(f"{path}: {exc}") from None
    if data.shape != (t, d) and not (t == 0 and data.size == 0):
        raise BadInput(f"{path}: header says {t}x{d}, found {data.shape[0]} rows"
                       f" of {data.shape[1] if data.ndim == 2 else 0} values")
    return data.reshape(t, d)


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise BadInput(f"{path}: no such file")
    if path.suffix.lower() == ".csv":
        return read_features_csv(path)
    return parse_features(path.read_bytes())


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """JSON document with optional ``encoder``, ``train`` and ``task`` sections.

    Every key must name a field of the matching dataclass; anything else is
    rejected before compute starts.
    """

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: SyntheticTask = field(default_factory=SyntheticTask)

    SECTIONS = {"encoder": EncoderConfig, "train": TrainConfig, "task": SyntheticTask}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise BadInput("config must be a JSON object")
        unknown = set(doc) - set(cls.SECTIONS)
        if unknown:
            raise BadInput(f"unknown config section(s): {sorted(unknown)}")
        built = {}
        for name, kind in cls.SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise BadInput(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(kind)}
            bad = set(section) - allowed
            if bad:
                raise BadInput(f"unknown key(s) in {name!r}: {sorted(bad)}")
            try:
                built[name] = kind(**section)
            except (TypeError, ValueError) as exc:
                raise BadInput(f"invalid {name!r} section: {exc}") from None
        return cls(**built)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise BadInput(f"{path}: no such file") from None
        except json.JSONDecodeError as exc:
            raise BadInput(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in self.SECTIONS}


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

_HASH_KEY = "__config_hash__"


def save_params(path, params: ParamSet, cfg: EncoderConfig) -> None:
    arrays = {k: np.asarray(v) for k, v in params.items()}
    arrays[_HASH_KEY] = np.array(cfg.shape_hash())
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path, cfg: EncoderConfig) -> ParamSet:
    """Load an archive written by :func:`save_params`, checking it fits ``cfg``.

    Extra tensors (a classifier head, say) are ignored.
    """
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise BadInput(f"{path}: no such file") from None
    except (ValueError, OSError) as exc:
        raise BadInput(f"{path}: not a parameter archive ({exc})") from None
    stored = str(arrays.pop(_HASH_KEY, ""))
    if stored != cfg.shape_hash():
        raise BadInput(f"{path}: parameters were saved for a different model shape "
                       f"(hash {stored or 'missing'}, config needs {cfg.shape_hash()})")
    ref = init_params(cfg)
    missing = [k for k in ref if k not in arrays]
    if missing:
        raise BadInput(f"{path}: missing tensors {missing[:5]}")
    for k, v in ref.items():
        if arrays[k].shape != v.shape:
            raise BadInput(f"{path}: tensor {k} has shape {arrays[k].shape}, expected {v.shape}")
    return ParamSet({k: arrays[k].astype(cfg.dtype) for k in ref})
