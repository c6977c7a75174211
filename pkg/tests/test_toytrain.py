import math

import numpy as np
import pytest

from ctxblock.encoder import init_params
from ctxblock.numerics import NumericError
from ctxblock.toytrain import (
    SyntheticTask,
    TrainConfig,
    default_encoder_config,
    evaluate,
    gen_synthetic,
    init_head,
    noam_lr,
    run_experiment,
    separation_verdict,
    train,
)

TINY = dict(n_layers=1, d_model=8, n_heads=2, d_ff=16, d_in=16)


def test_same_seed_same_bytes():
    task = SyntheticTask()
    a, b = gen_synthetic(5, task, 20), gen_synthetic(5, task, 20)
    assert a.x.tobytes() == b.x.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert gen_synthetic(6, task, 20).x.tobytes() != a.x.tobytes()


def test_flag_pairs_differ_only_where_expected():
    task = SyntheticTask()
    off = gen_synthetic(3, task, 10, flags=np.zeros(10, int))
    on = gen_synthetic(3, task, 10, flags=np.ones(10, int))
    diff_frames = np.any(off.x != on.x, axis=(0, 2))
    assert diff_frames[: task.flag_frames].all()
    assert not diff_frames[task.flag_frames:].any()
    assert np.all(off.labels != on.labels)
    np.testing.assert_array_equal(off.patterns, on.patterns)


def test_label_marginals_uniform():
    task = SyntheticTask()
    data = gen_synthetic(11, task, 1000)
    freq = np.bincount(data.labels.ravel(), minlength=task.n_patterns) / data.labels.size
    assert np.all(np.abs(freq - 1 / task.n_patterns) <= 0.05)
    assert abs(data.flags.mean() - 0.5) <= 0.05


def test_flag_sits_in_first_block():
    task = SyntheticTask()
    assert task.flag_frames == default_encoder_config("contextual").block_size


@pytest.mark.parametrize("kw", [dict(n_patterns=3), dict(n_patterns=0, use_flag=False), dict(flag_frames=40)])
def test_task_validation(kw):
    with pytest.raises(ValueError):
        SyntheticTask(**kw)


def test_noam_closed_form():
    d, w, s = 32, 200, 1.0
    peak = noam_lr(w, d, w, s)
    assert peak == pytest.approx(s * d ** -0.5 * w ** -0.5, rel=1e-12)
    assert all(noam_lr(k, d, w, s) < peak for k in (1, 50, 199, 201, 400, 10_000))
    # linear warmup, inverse square-root decay
    assert noam_lr(100, d, w, s) == pytest.approx(peak / 2, rel=1e-12)
    assert noam_lr(800, d, w, s) == pytest.approx(peak / 2, rel=1e-12)
    assert noam_lr(400, d, w, s) / noam_lr(1600, d, w, s) == pytest.approx(2.0, rel=1e-12)


def test_zero_learning_rate_keeps_params():
    task = SyntheticTask(t_prime=16)
    enc = default_encoder_config("contextual", **TINY)
    data = gen_synthetic(0, task, 16)
    cfg = TrainConfig(epochs=2, batch_size=8, lr_scale=0.0, seed=4)
    res = train(cfg, enc, data, data, n_classes=4)
    start = init_params(enc, seed=4).merged(init_head(enc, 4, 4))
    for k, v in start.items():
        np.testing.assert_array_equal(res.params[k], v)
    losses = [row["train_loss"] for row in res.curve]
    assert max(losses) - min(losses) <= 1e-12


def test_single_pattern_task_learns():
    task = SyntheticTask(t_prime=8, n_patterns=1, use_flag=False, flag_frames=4)
    enc = default_encoder_config("block", block_size=4, hop_size=4, **TINY)
    data = gen_synthetic(1, task, 32)
    cfg = TrainConfig(epochs=50, batch_size=16, warmup_steps=10, seed=0)
    # two output classes so the head must actually learn to favour class 0
    res = train(cfg, enc, data, n_classes=2)
    assert res.curve[-1]["train_loss"] <= 0.02, res.curve[-1]


def test_untrained_accuracy_near_chance():
    task = SyntheticTask()
    enc = default_encoder_config("contextual")
    data = gen_synthetic(9, task, 200)
    params = init_params(enc, seed=2).merged(init_head(enc, 4, 2))
    acc = evaluate(params, enc, data)["accuracy"]
    assert abs(acc - 0.25) <= 0.10


def test_evaluate_splits():
    task = SyntheticTask()
    enc = default_encoder_config("block")
    data = gen_synthetic(9, task, 20)
    params = init_params(enc).merged(init_head(enc, 4, 0))
    out = evaluate(params, enc, data)
    assert sorted(out["per_block"]) == [1, 2, 3, 4]
    assert out["pattern_accuracy"] >= out["accuracy"]


def test_first_epoch_lowers_loss_over_seeds():
    task = SyntheticTask()
    tcfg = TrainConfig(epochs=1, n_train=400, n_valid=100)
    for seed in range(1, 6):
        run = run_experiment("contextual", seed, task, tcfg)
        curve = run["curve"]
        assert curve[1]["valid_loss"] < curve[0]["valid_loss"], (seed, curve)


def test_training_is_deterministic():
    task = SyntheticTask(t_prime=16)
    tcfg = TrainConfig(epochs=1, n_train=32, n_valid=8, batch_size=16)
    a = run_experiment("contextual", 3, task, tcfg, enc_kw=TINY)
    b = run_experiment("contextual", 3, task, tcfg, enc_kw=TINY)
    assert a["curve"] == b["curve"]
    for k in a["params"]:
        assert a["params"][k].tobytes() == b["params"][k].tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    task = SyntheticTask(t_prime=16)
    tcfg = TrainConfig(epochs=1, n_train=16, n_valid=8, batch_size=8, lr_scale=math.inf)
    with pytest.raises(NumericError, match="non-finite"):
        run_experiment("block", 0, task, tcfg, enc_kw=TINY)


def test_separation_verdict():
    good = separation_verdict({"contextual": [0.95] * 5, "block": [0.5, 0.52, 0.49, 0.5, 0.51], "batch": [0.97] * 5})
    assert good["passed"]
    bad = separation_verdict({"contextual": [0.6] * 5, "block": [0.5] * 5})
    assert not bad["passed"] and not bad["checks"]["contextual_minus_block"]
