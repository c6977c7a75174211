"""Command-line entry point.

Exit codes: 0 ok, 1 a check failed, 2 bad input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import tracemalloc
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import frontend as fe
from .attention import count_flops
from .blocking import make_layout
from .encoder import (
    EncoderConfig,
    StreamingEncoder,
    analytic_attention_flops,
    attention_stats,
    chunked,
    encode,
    encode_batch,
    encode_masked_block,
    first_emission_raw_frames,
    init_params,
)
from .io import BadInput, RunConfig, load_params, read_features, save_params, write_features
from .masks import contextual_mask, naive_block_mask, to_pbm
from .numerics import NumericError
from .toytrain import run_experiment, separation_verdict

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_seeds(text: str) -> list[int]:
    """``"1..5"`` or ``"1,3,4"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = _int_list(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _encoder_cfg(args, **overrides) -> EncoderConfig:
    cfg = RunConfig.load(args.config).encoder
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "precision", None):
        overrides["precision"] = args.precision
    try:
        return cfg.replace(**overrides) if overrides else cfg
    except ValueError as exc:
        raise BadInput(str(exc)) from None


def _params(args, cfg: EncoderConfig):
    if getattr(args, "params", None):
        return load_params(args.params, cfg)
    seed = args.seed if args.seed is not None else cfg.seed
    return init_params(cfg, seed=seed)


def _features(args, cfg: EncoderConfig) -> np.ndarray:
    x = read_features(args.features)
    if x.shape[1] != cfg.d_in:
        raise BadInput(f"{args.features}: features have d={x.shape[1]}, config expects d_in={cfg.d_in}")
    if x.shape[0] == 0:
        raise BadInput(f"{args.features}: no frames")
    return x.astype(cfg.dtype)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_encode(args) -> int:
    cfg = _encoder_cfg(args)
    x = _features(args, cfg)
    params = _params(args, cfg)
    t0 = time.perf_counter()
    h = encode(x, cfg, params).h
    wall = time.perf_counter() - t0
    write_features(args.out, h)
    print(f"L={h.shape[0]} d_model={h.shape[1]} mode={cfg.mode} wall={wall:.4f}s")
    return EXIT_OK


def _parse_chunks(text: str) -> list[int | None]:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok == "whole":
            out.append(None)
        else:
            try:
                size = int(tok)
            except ValueError:
                raise BadInput(f"bad chunk size {tok!r}") from None
            if size < 1:
                raise BadInput("chunk sizes must be >= 1")
            out.append(size)
    return out


def cmd_compare(args) -> int:
    cfg = _encoder_cfg(args)
    if cfg.mode not in ("block", "contextual"):
        raise BadInput("compare needs mode 'block' or 'contextual'")
    if args.corrupt_context and cfg.mode != "contextual":
        raise BadInput("--corrupt-context needs mode 'contextual'")
    x = _features(args, cfg)
    params = _params(args, cfg)
    ref = encode_masked_block(x, cfg, params).h
    tol = args.tolerance if args.tolerance is not None else cfg.tolerance
    worst = 0.0
    for size in _parse_chunks(args.chunks):
        session = StreamingEncoder(cfg, params)
        feed = [x] if size is None else chunked(x, size)
        parts = []
        corrupted = False
        for chunk in feed:
            parts.append(session.push(chunk))
            # perturb once, as soon as a block's context has been stored
            if args.corrupt_context and not corrupted and session.state.blocks_done:
                session.corrupt_context(scale=1.0, seed=0)
                corrupted = True
        parts.append(session.finish())
        got = np.concatenate(parts)
        diff = float(np.abs(got - ref).max()) if got.shape == ref.shape else float("inf")
        worst = max(worst, diff)
        label = "whole" if size is None else str(size)
        print(f"chunk={label:>5} max_abs_diff={diff:.3e} {'ok' if diff <= tol else 'FAIL'}")
    verdict = worst <= tol
    print(f"max_abs_diff={worst:.3e} tolerance={tol:.1e} {'PASS' if verdict else 'FAIL'}")
    return EXIT_OK if verdict else EXIT_CHECK


def _measure(fn):
    tracemalloc.start()
    t0 = time.perf_counter()
    with count_flops() as box:
        result = fn()
    wall = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return result, wall, peak, box["flops"]


def bench_rows(base: EncoderConfig, block_sizes: list[int], lengths: list[int],
               half_overlap: bool = False, seed: int = 0) -> list[dict]:
    """One row per (mode, block size, length); batch rows have no block size."""
    rows = []
    factor = fe.downsample_factor(base.frontend)
    rng = np.random.default_rng(seed)
    for t_prime in lengths:
        x = rng.standard_normal((t_prime * factor, base.d_in)).astype(base.dtype)
        settings = [("batch", None)] + [(m, L) for m in ("block", "contextual") for L in block_sizes]
        for mode, L in settings:
            kw = {"mode": mode}
            if L is not None:
                kw.update(block_size=L, hop_size=L // 2 if half_overlap and L > 1 else L)
            cfg = base.replace(**kw)
            params = init_params(cfg, seed=seed)
            if mode == "batch":
                _, wall, peak, flops = _measure(lambda: encode_batch(x, cfg, params))
                latency = t_prime * factor
                measured_latency = latency
            else:
                def run():
                    s = StreamingEncoder(cfg, params)
                    for row in chunked(x, 1):
                        s.push(row)
                    s.finish()
                    return s
                session, wall, peak, flops = _measure(run)
                latency = first_emission_raw_frames(cfg)
                measured_latency = session.first_emit_raw
            analytic = analytic_attention_flops(cfg, t_prime)
            rows.append({
                "mode": mode, "block_size": L or "", "hop": cfg.hop_size if L else "", "t_prime": t_prime,
                "wall_s": round(wall, 6), "peak_bytes": peak,
                "flops_measured": flops, "flops_analytic": analytic,
                "latency_raw_frames": latency, "latency_measured": measured_latency,
            })
    return rows


def scaling_checks(rows: list[dict], tol: float = 0.10) -> dict[str, bool]:
    """Doubling T' should scale batch FLOPs by 4 and block-mode FLOPs by 2."""
    checks = {"measured_matches_analytic": all(
        abs(r["flops_measured"] - r["flops_analytic"]) <= tol * r["flops_analytic"] for r in rows)}
    by_key: dict[tuple, dict[int, int]] = {}
    for r in rows:
        by_key.setdefault((r["mode"], r["block_size"]), {})[r["t_prime"]] = r["flops_measured"]
    for (mode, L), series in by_key.items():
        want = 4.0 if mode == "batch" else 2.0
        ts = sorted(series)
        for a, b in zip(ts, ts[1:]):
            if b != 2 * a:
                continue
            ratio = series[b] / series[a]
            checks[f"{mode}{L or ''}_x{a}->{b}"] = abs(ratio - want) <= tol * want
    return checks


def cmd_bench(args) -> int:
    base = _encoder_cfg(args)
    rows = bench_rows(base, args.block_sizes, args.lengths, args.half_overlap, args.seed or 0)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    checks = scaling_checks(rows)
    for name, ok in checks.items():
        print(f"{name}: {'ok' if ok else 'FAIL'}", file=sys.stderr)
    return EXIT_OK if all(checks.values()) else EXIT_CHECK


def stats_rows(stats) -> list[dict]:
    rows = []
    n_layers, m, _ = stats.frame_mass.shape
    for n in range(n_layers):
        for i in range(m):
            for r, rel in enumerate(stats.rel_positions):
                rows.append({"kind": "frame", "layer": n + 1, "head": i + 1, "rel_pos": int(rel),
                             "block": "", "mass": float(stats.frame_mass[n, i, r])})
            rows.append({"kind": "context", "layer": n + 1, "head": i + 1, "rel_pos": "",
                         "block": "", "mass": float(stats.context_mass[n, i])})
            for b in range(stats.context_mass_by_block.shape[2]):
                rows.append({"kind": "context_block", "layer": n + 1, "head": i + 1, "rel_pos": "",
                             "block": b + 1, "mass": float(stats.context_mass_by_block[n, i, b])})
    return rows


def cmd_attn_stats(args) -> int:
    cfg = _encoder_cfg(args, capture_attention=True)
    if cfg.mode != "contextual":
        raise BadInput("attn-stats needs mode 'contextual'")
    x = _features(args, cfg)
    stats = attention_stats(x, cfg, _params(args, cfg))
    _write_csv(args.out, stats_rows(stats))
    worst = float(np.abs(stats.query_totals - 1.0).max())
    print(f"queries={stats.query_totals.size} max|mass-1|={worst:.1e}")
    for n, mass in enumerate(stats.context_mass.mean(axis=1), start=1):
        print(f"layer {n}: mean context mass {mass:.4f}")
    return EXIT_OK if worst <= 1e-9 else EXIT_CHECK


def _write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cmd_toy_train(args) -> int:
    rc = RunConfig.load(args.config)
    tcfg = rc.train
    if args.epochs is not None:
        tcfg = type(tcfg)(**{**asdict(tcfg), "epochs": args.epochs})
    enc_kw = {k: v for k, v in asdict(rc.encoder).items() if k != "mode"}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modes = ("batch", "block", "contextual")
    late: dict[str, list[float]] = {m: [] for m in modes}
    acc_rows, trend_rows = [], []
    failed = False
    for mode in modes:
        for seed in args.seeds:
            try:
                run = run_experiment(mode, seed, rc.task, tcfg, enc_kw)
            except NumericError as exc:
                print(f"{mode} seed {seed}: diverged ({exc})", file=sys.stderr)
                failed = True
                continue
            _write_csv(out / f"curve_{mode}_seed{seed}.csv", run["curve"])
            save_params(out / f"params_{mode}_seed{seed}.npz", run["params"], run["enc_cfg"])
            met = run["metrics"]
            late[mode].append(met["late_accuracy"])
            row = {"mode": mode, "seed": seed, "accuracy": met["accuracy"],
                   "late_accuracy": met["late_accuracy"], "pattern_accuracy": met["pattern_accuracy"]}
            row.update({f"block{b}_accuracy": v for b, v in met["per_block"].items()})
            acc_rows.append(row)
            print(f"{mode:>10} seed {seed}: late_accuracy={met['late_accuracy']:.3f} "
                  f"accuracy={met['accuracy']:.3f}")
            if mode == "contextual":
                cfg = run["enc_cfg"].replace(capture_attention=True)
                st = attention_stats(run["valid"].x[:100], cfg, run["params"])
                for n, mass in enumerate(st.context_mass.mean(axis=1), start=1):
                    trend_rows.append({"seed": seed, "layer": n, "context_mass": float(mass)})
    if acc_rows:
        _write_csv(out / "accuracy.csv", acc_rows)
    if trend_rows:
        _write_csv(out / "attention_trend.csv", trend_rows)
    if failed or not all(late.values()):
        return EXIT_NUMERIC
    verdict = separation_verdict(late)
    (out / "verdict.json").write_text(json.dumps(verdict, indent=2) + "\n")
    for name, ok in verdict["checks"].items():
        print(f"{name}: {'ok' if ok else 'FAIL'}")
    print("separation:", "PASS" if verdict["passed"] else "FAIL")
    return EXIT_OK if verdict["passed"] else EXIT_CHECK


def cmd_dump_mask(args) -> int:
    try:
        layout = make_layout(args.t_prime, args.block_size, args.hop or args.block_size)
    except ValueError as exc:
        raise BadInput(str(exc)) from None
    if not 0 <= args.group < layout.n_groups:
        raise BadInput(f"group must be in [0, {layout.n_groups - 1}]")
    if args.kind == "naive":
        mask = naive_block_mask(layout)[args.group]
    else:
        mask = contextual_mask(layout, args.layer, layout.n_groups, args.group)
    text = to_pbm(mask)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxblock", description="Contextual block-processing encoder tools")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, features=True):
        if features:
            sp.add_argument("--features", required=True, help="FEAT binary file or CSV fixture")
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--mode", choices=("batch", "block", "contextual"))
        sp.add_argument("--precision", choices=("float32", "float64"))
        sp.add_argument("--params", help="parameter archive (.npz)")
        sp.add_argument("--seed", type=int, help="initialisation seed when no --params given")

    sp = sub.add_parser("encode", help="encode a feature file")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("compare", help="check streaming against the masked path")
    common(sp)
    sp.add_argument("--chunks", default="1,7,whole", help="comma list of chunk sizes or 'whole'")
    sp.add_argument("--tolerance", type=float)
    sp.add_argument("--corrupt-context", action="store_true", help="perturb the carried context (negative control)")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("bench", help="cost and latency per block size")
    common(sp, features=False)
    sp.add_argument("--block-sizes", type=_int_list, default=[4, 8, 16, 32])
    sp.add_argument("--lengths", type=_int_list, default=[64, 128, 256])
    sp.add_argument("--half-overlap", action="store_true")
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("attn-stats", help="attention mass on frames vs context")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_attn_stats)

    sp = sub.add_parser("toy-train", help="train all modes on the synthetic flag task")
    sp.add_argument("--config")
    sp.add_argument("--seeds", type=parse_seeds, default=[1, 2, 3, 4, 5])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_toy_train)

    sp = sub.add_parser("dump-mask", help="write an attention mask as a PBM bitmap")
    sp.add_argument("--t-prime", type=int, required=True)
    sp.add_argument("--block-size", type=int, required=True)
    sp.add_argument("--hop", type=int)
    sp.add_argument("--kind", choices=("naive", "contextual"), default="contextual")
    sp.add_argument("--layer", type=int, default=1)
    sp.add_argument("--group", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_dump_mask)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BadInput, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
