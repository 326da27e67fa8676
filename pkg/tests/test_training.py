import json

import numpy as np
import pytest
import torch

from conftest import PLAN, periodic_tokens
from lsm.checkpoint import save_checkpoint
from lsm.errors import ConfigError, TrainingError
from lsm.model import LsmConfig, build_model, forecast_mask, loss_terms
from lsm.training import (
    BandStats,
    TrainPlan,
    chronological_split,
    compute_band_stats,
    detect_hd,
    evaluate_loss,
    finetune,
    lr_at,
    read_band_stats,
    split_tokens,
    stats_from_values,
    train,
    train_partitions,
    write_band_stats,
)

TINY = LsmConfig()


def test_constant_band_has_zero_dispersion():
    st = stats_from_values({1: np.full(100, -90.0)})[1]
    assert st.sd_db == 0.0 and st.mad_db == 0.0


def test_two_level_band_by_hand():
    st = stats_from_values({1: [-60.0, -50.0] * 10})[1]
    assert st.sd_db == 5.0 and st.mad_db == 5.0


def _stats(sds):
    return {b: BandStats(b, sd, sd * 0.8, 10) for b, sd in enumerate(sds)}


def test_identical_dispersion_flags_nothing():
    hd, regular = detect_hd(_stats([2.0] * 10))
    assert hd == [] and len(regular) == 10


def test_tenfold_band_flagged_by_hand_rule():
    sds = [2.0, 2.1, 1.9, 2.05, 1.95, 20.0]
    med = np.median(sds)
    spread = np.median(np.abs(np.array(sds) - med))
    assert 20.0 > med + 3 * spread
    hd, _ = detect_hd(_stats(sds))
    assert hd == [5]


def test_detect_hd_needs_three_bands():
    with pytest.raises(ValueError):
        detect_hd(_stats([1.0, 2.0]))


def test_band_stats_from_tokens_and_file(tmp_path):
    tokens = periodic_tokens(30)
    stats = compute_band_stats(tokens)
    assert sorted(stats) == list(PLAN.freqs_hz)
    assert all(s.sd_db > 5 for s in stats.values())
    path = tmp_path / "band_stats.json"
    write_band_stats(stats, path)
    assert read_band_stats(path) == stats
    assert json.loads(path.read_text())["hd_bands"] == []


def test_split_hand_example():
    parts = chronological_split(list(range(1, 11)))
    assert [p.tolist() for p in parts] == [list(range(8)), [8], [9]]


def test_split_ties_keep_original_order():
    parts = chronological_split([5.0] * 10)
    assert np.concatenate(parts).tolist() == list(range(10))


def test_split_ordering_property(rng):
    for _ in range(50):
        n = int(rng.integers(3, 200))
        ts = rng.integers(0, 50, size=n).astype(float)
        tr, va, te = chronological_split(ts)
        assert min(map(len, (tr, va, te))) >= 1
        assert ts[tr].max() <= ts[va].min() and ts[va].max() <= ts[te].min()
        assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(n))


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        chronological_split(range(10), (0.5, 0.6, -0.1))
    with pytest.raises(ValueError):
        chronological_split(range(2))


def test_split_tokens_by_time():
    tokens = periodic_tokens(20)
    order = np.random.default_rng(0).permutation(20)
    shuffled = tokens.subset(order)
    tr, va, te = split_tokens(shuffled)
    assert max(tr.timestamps()) <= min(va.timestamps()) <= min(te.timestamps())


def test_lr_schedule():
    plan = TrainPlan(lr=1e-3, steps=100, min_lr_ratio=0.1, warmup_steps=10)
    assert lr_at(plan, 0) == pytest.approx(1e-4)
    assert lr_at(plan, 10) == pytest.approx(1e-3)
    assert lr_at(plan, 100) == pytest.approx(1e-4)
    assert lr_at(plan, 55) == pytest.approx(1e-4 + 0.9e-3 * 0.5)


def test_plan_validation_and_alpha():
    plan = TrainPlan()
    assert plan.alpha_for("hd") == 0.1 and plan.alpha_for("regular") == 1.0
    assert TrainPlan(alpha_override=0.4).alpha_for("hd") == 0.4
    assert TrainPlan.from_dict(plan.to_dict()) == plan
    for bad in (dict(alpha_hd=2.0), dict(split=(0.5, 0.5, 0.5)), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            TrainPlan(**bad)
    with pytest.raises(ConfigError):
        TrainPlan.from_dict({"momentum": 0.9})


def test_loss_decreases_on_periodic_band():
    tokens = periodic_tokens(64, seed=1)
    plan = TrainPlan(steps=200, batch_size=8, lr=3e-3, eval_every=1000, seed=0)
    res = train(build_model(TINY, 0), plan, tokens)
    losses = np.array(res.train_losses)
    smoothed = losses.reshape(5, 40).mean(axis=1)
    assert np.all(np.diff(smoothed) < 0)


def test_alpha_override_one_is_pure_ce():
    tokens = periodic_tokens(8)
    model = build_model(TINY, 0)
    batch = torch.from_numpy(tokens.sequences.astype(np.int64))
    with torch.no_grad():
        ce, _ = loss_terms(model(batch[:, :-1]), batch[:, 1:], forecast_mask(8))
    loss = evaluate_loss(model, tokens.sequences, TrainPlan(alpha_override=1.0).alpha_for("hd"), batch_size=8)
    assert loss == pytest.approx(float(ce), rel=1e-6)


def test_same_seed_same_checkpoint_bytes(tmp_path):
    tokens = periodic_tokens(24)
    plan = TrainPlan(steps=6, batch_size=4, eval_every=3, seed=5)
    for name in ("a", "b"):
        res = train(build_model(TINY, 5), plan, tokens, tokens.subset(range(6)))
        save_checkpoint(res.checkpoint, tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_best_validation_checkpoint_is_kept(tmp_path):
    tokens = periodic_tokens(24)
    plan = TrainPlan(steps=8, batch_size=4, eval_every=2, lr=1e-2, seed=0)
    log_path = tmp_path / "log.jsonl"
    res = train(build_model(TINY, 0), plan, tokens, tokens.subset(range(8)), log_path=log_path)
    best_step, best = min(res.val_losses, key=lambda sv: sv[1])
    assert res.checkpoint.metadata["step"] == best_step
    assert res.checkpoint.metadata["best_val_loss"] == best
    assert evaluate_loss(res.checkpoint.model, tokens.sequences[:8], 1.0, 4) == pytest.approx(best, rel=1e-6)
    entries = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert [e["step"] for e in entries] == list(range(1, 9))
    assert "val_loss" in entries[1] and "val_loss" not in entries[0]


def test_batches_are_homogeneous_per_partition():
    tokens = periodic_tokens(30)
    hd = [PLAN.freqs_hz[1]]
    plan = TrainPlan(steps=12, batch_size=4, seed=2)
    res = train(build_model(TINY, 0), plan, tokens, hd_bands=hd)
    alphas = {e["partition"]: e["alpha"] for e in res.log}
    assert alphas == {"hd": 0.1, "regular": 1.0}


def test_partitioned_models():
    tokens = periodic_tokens(30)
    plan = TrainPlan(steps=2, batch_size=4)
    res = train_partitions(TINY, plan, tokens, tokens, [PLAN.freqs_hz[0]])
    assert set(res) == {"hd", "regular"}
    single = train_partitions(TINY, TrainPlan(steps=2, batch_size=4, single_model=True), tokens, None,
                              [PLAN.freqs_hz[0]])
    assert set(single) == {"all"}


def test_nonfinite_loss_raises():
    model = build_model(TINY, 0)
    with torch.no_grad():
        model.head.weight.fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, TrainPlan(steps=1, batch_size=2), periodic_tokens(4))


def test_empty_training_set_rejected():
    with pytest.raises(ConfigError):
        train(build_model(TINY, 0), TrainPlan(steps=1), periodic_tokens(4).subset([]))


def test_finetune_zero_steps_and_zero_lr_are_no_ops():
    tokens = periodic_tokens(12)
    base = train(build_model(TINY, 0), TrainPlan(steps=3, batch_size=4), tokens).checkpoint
    zero = finetune(base, tokens, tokens, TrainPlan(steps=0))
    assert all(torch.equal(zero.checkpoint.state[k], v) for k, v in base.state.items())
    frozen = finetune(base, tokens, tokens, TrainPlan(steps=4, batch_size=4, lr=0.0, eval_every=2))
    assert all(torch.equal(frozen.checkpoint.state[k], v) for k, v in base.state.items())
    assert frozen.val_losses[-1][1] == frozen.val_losses[0][1]


def test_finetune_rejects_other_architecture():
    tokens = periodic_tokens(4)
    base = train(build_model(TINY, 0), TrainPlan(steps=1, batch_size=2), tokens).checkpoint
    with pytest.raises(ConfigError):
        finetune(base, tokens, None, TrainPlan(steps=1), expected_config=LsmConfig(d_model=32, n_q_heads=2))
