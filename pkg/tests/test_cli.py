import csv
import json
import struct

import numpy as np
import pytest

from ctxblock.cli import bench_rows, main, parse_seeds, scaling_checks
from ctxblock.encoder import EncoderConfig, init_params
from ctxblock.io import BadInput, RunConfig, load_params, parse_features, read_features, save_params, write_features
from ctxblock.masks import from_pbm


@pytest.fixture
def feat_file(tmp_path):
    path = tmp_path / "x.feat"
    write_features(path, np.random.default_rng(0).standard_normal((24, 16)))
    return path


def write_config(tmp_path, **encoder):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"encoder": encoder}))
    return path


def test_feature_layout_bytes(tmp_path):
    path = tmp_path / "a.feat"
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_features(path, x)
    blob = path.read_bytes()
    assert blob[:4] == b"FEAT"
    assert struct.unpack(">I", blob[:4])[0] == 0x46454154
    assert struct.unpack("<III", blob[4:16]) == (1, 2, 3)
    assert len(blob) == 16 + 4 * 6
    assert struct.unpack("<f", blob[16 + 4 * 4:16 + 4 * 5])[0] == 4.0  # row-major: x[1, 1]


def test_feature_round_trip(tmp_path):
    x = np.random.default_rng(1).standard_normal((7, 5)).astype(np.float32)
    write_features(tmp_path / "r.feat", x)
    np.testing.assert_array_equal(read_features(tmp_path / "r.feat"), x)


def test_feature_rejections():
    good = b"FEAT" + struct.pack("<III", 1, 2, 2) + b"\0" * 16
    parse_features(good)
    with pytest.raises(BadInput, match="4 bytes missing"):
        parse_features(good[:-4])
    with pytest.raises(BadInput, match="trailing"):
        parse_features(good + b"\0")
    with pytest.raises(BadInput, match="magic"):
        parse_features(b"FEAX" + good[4:])
    with pytest.raises(BadInput, match="version"):
        parse_features(b"FEAT" + struct.pack("<III", 2, 2, 2) + b"\0" * 16)
    with pytest.raises(BadInput, match="short"):
        parse_features(b"FEAT")


def test_csv_import(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("2,3\n1,2,3\n4,5,6\n")
    np.testing.assert_array_equal(read_features(path), [[1, 2, 3], [4, 5, 6]])
    path.write_text("3,3\n1,2,3\n")
    with pytest.raises(BadInput):
        read_features(path)


def test_run_config_rejects_unknown_keys():
    with pytest.raises(BadInput, match="lr"):
        RunConfig.from_dict({"train": {"lr": 1}})
    with pytest.raises(BadInput, match="section"):
        RunConfig.from_dict({"model": {}})
    with pytest.raises(BadInput, match="divisible"):
        RunConfig.from_dict({"encoder": {"d_model": 10, "n_heads": 4}})
    rc = RunConfig.from_dict({"encoder": {"block_size": 4, "hop_size": 2}, "task": {"t_prime": 16}})
    assert rc.encoder.gap == 2 and rc.task.t_prime == 16
    assert RunConfig.from_dict(rc.to_dict()) == rc


def test_params_archive(tmp_path):
    cfg = EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, d_in=4)
    p = init_params(cfg, seed=3)
    save_params(tmp_path / "p.npz", p, cfg)
    back = load_params(tmp_path / "p.npz", cfg)
    for k in p:
        np.testing.assert_array_equal(back[k], p[k])
    with pytest.raises(BadInput, match="different model shape"):
        load_params(tmp_path / "p.npz", cfg.replace(d_model=4))


def test_encode_deterministic(tmp_path, feat_file):
    for name in ("a", "b"):
        assert main(["encode", "--features", str(feat_file), "--seed", "4", "--out", str(tmp_path / f"{name}.feat")]) == 0
    assert (tmp_path / "a.feat").read_bytes() == (tmp_path / "b.feat").read_bytes()
    assert read_features(tmp_path / "a.feat").shape == (24, 32)


def test_encode_mode_collapse(tmp_path, feat_file):
    cfg = write_config(tmp_path, block_size=32, hop_size=32, mode="block")
    main(["encode", "--features", str(feat_file), "--config", str(cfg), "--out", str(tmp_path / "blk.feat")])
    main(["encode", "--features", str(feat_file), "--config", str(cfg), "--mode", "batch",
          "--out", str(tmp_path / "bat.feat")])
    # float32 on disk; the in-memory check lives in the encoder tests
    a, b = read_features(tmp_path / "blk.feat"), read_features(tmp_path / "bat.feat")
    assert np.abs(a - b).max() <= 1e-6


def test_encode_truncated_file(tmp_path, feat_file, capsys):
    bad = tmp_path / "bad.feat"
    bad.write_bytes(feat_file.read_bytes()[:-10])
    assert main(["encode", "--features", str(bad), "--out", str(tmp_path / "o.feat")]) == 2
    assert "10 bytes missing" in capsys.readouterr().err


def test_encode_bad_config(tmp_path, feat_file):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"encoder": {"heads": 3}}))
    assert main(["encode", "--features", str(feat_file), "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_encode_numeric_failure(tmp_path, feat_file):
    cfg = EncoderConfig()
    p = init_params(cfg).replace(**{"layer1.wq": np.full((32, 32), np.inf)})
    save_params(tmp_path / "p.npz", p, cfg)
    code = main(["encode", "--features", str(feat_file), "--params", str(tmp_path / "p.npz"),
                 "--out", str(tmp_path / "o.feat")])
    assert code == 3


@pytest.mark.parametrize("enc", [{}, {"block_size": 8, "hop_size": 4}, {"mode": "block"}])
def test_compare_passes(tmp_path, feat_file, capsys, enc):
    cfg = write_config(tmp_path, **enc)
    assert main(["compare", "--features", str(feat_file), "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "chunk=    1" in out and "chunk=    7" in out and "chunk=whole" in out and "PASS" in out


def test_compare_negative_control(feat_file, capsys):
    assert main(["compare", "--features", str(feat_file), "--corrupt-context", "--chunks", "1"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_compare_rejects_batch(feat_file):
    assert main(["compare", "--features", str(feat_file), "--mode", "batch"]) == 2


def test_bench_scaling_and_latency():
    base = EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, d_in=4)
    rows = bench_rows(base, [4, 8], [16, 32])
    checks = scaling_checks(rows)
    assert all(checks.values()), checks
    for r in rows:
        if r["mode"] != "batch":
            assert r["latency_raw_frames"] == r["latency_measured"] == r["block_size"]
    conv = bench_rows(base.replace(frontend="conv2d"), [4], [16])
    assert all(r["latency_measured"] == 16 for r in conv if r["mode"] != "batch")


def test_bench_csv(tmp_path):
    cfg = write_config(tmp_path, n_layers=1, d_model=8, n_heads=2, d_ff=16)
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", str(cfg), "--block-sizes", "4", "--lengths", "8,16", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["mode"] for r in rows} == {"batch", "block", "contextual"}
    assert {"wall_s", "peak_bytes", "flops_measured", "flops_analytic", "latency_raw_frames"} <= set(rows[0])


def test_attn_stats(tmp_path, feat_file, capsys):
    out = tmp_path / "stats.csv"
    cfg = write_config(tmp_path, n_layers=2)
    assert main(["attn-stats", "--features", str(feat_file), "--config", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    for layer in ("1", "2"):
        for head in ("1", "2", "3", "4"):
            frame = sum(float(r["mass"]) for r in rows if r["kind"] == "frame" and r["layer"] == layer and r["head"] == head)
            ctx = [float(r["mass"]) for r in rows if r["kind"] == "context" and r["layer"] == layer and r["head"] == head]
            assert abs(frame + ctx[0] - 1.0) <= 1e-9
    block1_deep = [float(r["mass"]) for r in rows if r["kind"] == "context_block" and r["layer"] == "2" and r["block"] == "1"]
    assert block1_deep and all(m == 0.0 for m in block1_deep)


def test_attn_stats_needs_contextual(tmp_path, feat_file):
    assert main(["attn-stats", "--features", str(feat_file), "--mode", "block", "--out", str(tmp_path / "s.csv")]) == 2


def test_toy_train_outputs(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "encoder": {"n_layers": 1, "d_model": 8, "n_heads": 2, "d_ff": 16, "block_size": 4, "hop_size": 4},
        "train": {"n_train": 16, "n_valid": 8, "batch_size": 8},
        "task": {"t_prime": 8, "flag_frames": 4},
    }))
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["toy-train", "--config", str(cfg), "--seeds", "1", "--epochs", "1", "--out", str(out)])
        assert code in (0, 1)
        runs.append(out)
    names = sorted(p.name for p in runs[0].glob("curve_*.csv"))
    assert names == ["curve_batch_seed1.csv", "curve_block_seed1.csv", "curve_contextual_seed1.csv"]
    for name in names + ["accuracy.csv", "attention_trend.csv"]:
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
    verdict = json.loads((runs[0] / "verdict.json").read_text())
    assert set(verdict["checks"]) == {"contextual_minus_block", "block_near_chance", "contextual_near_batch"}


def test_dump_mask(tmp_path):
    out = tmp_path / "m.pbm"
    assert main(["dump-mask", "--t-prime", "8", "--block-size", "4", "--layer", "2", "--out", str(out)]) == 0
    m = from_pbm(out.read_text())
    assert m.shape == (10, 10) and m[4, 8] and not m[0, 8]
    assert main(["dump-mask", "--t-prime", "8", "--block-size", "4", "--hop", "5"]) == 2


def test_seed_parsing():
    assert parse_seeds("1..5") == [1, 2, 3, 4, 5]
    assert parse_seeds("2,7") == [2, 7]


def test_bad_arguments():
    assert main(["encode"]) == 2
