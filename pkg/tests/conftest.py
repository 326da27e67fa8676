"""Shared builders for the test-suite."""

from __future__ import annotations

import json
import os
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
import torch

from lsm.iq import BandPlan, IqRecord
from lsm.spectrogram import ForecastPair
from lsm.tokenizer import TokenFile, encode_pairs

torch.set_num_threads(1)

PLAN = BandPlan((540_000_000, 630_000_000, 650_000_000))


def random_timestamp(rng) -> datetime:
    base = datetime(2016, 1, 1, tzinfo=timezone.utc)
    span = int((datetime(2035, 12, 31, 23, 59, 59, tzinfo=timezone.utc) - base).total_seconds())
    return base + timedelta(seconds=int(rng.integers(0, span + 1)))


def random_pair(rng, plan: BandPlan = PLAN, lo: int = -118, hi: int = -18) -> ForecastPair:
    values = rng.integers(lo, hi + 1, size=256).astype(np.float64)
    return ForecastPair(
        input=values[:128],
        target=values[128:],
        bin_index=int(rng.integers(0, 256)),
        gain_db=int(rng.integers(0, 80)),
        center_freq_hz=int(rng.choice(plan.freqs_hz)),
        timestamp_utc=random_timestamp(rng),
    )


def random_record(rng, n: int = 64) -> IqRecord:
    samples = (rng.standard_normal(n) + 1j * rng.standard_normal(n)).astype(np.complex64)
    return IqRecord(
        site_id=f"site-{int(rng.integers(0, 100))}",
        center_freq_hz=int(rng.integers(54_000_000, 990_000_000)),
        sample_rate_hz=int(rng.integers(1, 20) * 1_000_000),
        gain_db=int(rng.integers(0, 80)),
        timestamp_utc=random_timestamp(rng),
        samples=samples,
    )


def periodic_tokens(n: int, plan: BandPlan = PLAN, period: int = 8, low: int = -95, high: int = -80,
                    seed: int = 0, start=None) -> TokenFile:
    """Square-wave PSD sequences with random phase, one minute apart."""
    rng = np.random.default_rng(seed)
    start = start or datetime(2023, 6, 1, tzinfo=timezone.utc)
    pairs = []
    t = np.arange(256)
    for i in range(n):
        phase = int(rng.integers(0, period))
        row = np.where(((t + phase) // (period // 2)) % 2 == 0, high, low).astype(np.float64)
        row += rng.integers(-1, 2, size=256)
        pairs.append(ForecastPair(
            input=row[:128], target=row[128:], bin_index=i % 256, gain_db=0,
            center_freq_hz=plan.freqs_hz[i % len(plan)],
            timestamp_utc=start + timedelta(minutes=i),
        ))
    return TokenFile(encode_pairs(pairs, plan), plan, "tiny")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CLI_CORPUS = {
    "scene": {
        "seed": 77,
        "duration_s": 1.0,
        "sample_rate_hz": 1_638_400,
        "noise_floor_dbm": -100.0,
        "components": [{"kind": "burst", "start_hz": -64_000, "stop_hz": 64_000, "power_dbm": -80.0,
                        "period_s": 0.125, "duty_cycle": 0.5}],
    },
    "bands": [{"center_freq_hz": 630_000_000}, {"center_freq_hz": 650_000_000, "noise_floor_dbm": -95.0},
              {"center_freq_hz": 540_000_000, "components": []}],
    "records_per_band": 1,
}


def run_cli_pipeline(root, seed: int = 5, steps: int = 4):
    """synth -> preprocess -> tokenize -> stats -> split -> train -> finetune -> predict -> eval -> export-plots.

    Runs inside ``root`` with relative paths, so two roots can be compared byte for byte.
    """
    from lsm.cli import dispatch

    root.mkdir(parents=True, exist_ok=True)
    (root / "corpus.json").write_text(json.dumps(CLI_CORPUS))
    common = ["--threads", "1", "--seed", str(seed)]
    train_args = ["--set", f"train.steps={steps}", "--set", "train.batch_size=4", "--set", "train.eval_every=2"]
    stats = "stats/band_stats.json"
    stages = [
        ["synth", "--spec", "corpus.json", "--out", "iq"],
        ["preprocess", "--in", "iq", "--out", "spec"],
        ["tokenize", "--in", "spec", "--out", "tokens/all.tok"],
        ["stats", "--tokens", "tokens/all.tok", "--out", "stats"],
        ["split", "--tokens", "tokens/all.tok", "--out", "split"],
        ["train", "--train", "split/train.tok", "--val", "split/val.tok", "--stats", stats, "--out", "model"]
        + train_args,
        ["finetune", "--checkpoint", "model", "--train", "split/val.tok", "--val", "split/test.tok",
         "--out", "finetuned"] + train_args,
        ["predict", "--model", "model", "--tokens", "split/test.tok", "--out", "pred/forecast.tok"],
        ["eval", "--forecasts", "pred/forecast.tok", "--truth", "split/test.tok", "--stats", stats,
         "--format", "both", "--out", "report"],
        ["export-plots", "--report", "report/report.json", "--stats", stats, "--out", "plots"],
    ]
    cwd = os.getcwd()
    os.chdir(root)
    try:
        for argv in stages:
            code = dispatch(argv + common)
            assert code == 0, f"{argv[0]} exited {code}"
    finally:
        os.chdir(cwd)
    return root


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance table when the acceptance module ran."""
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS):
        terminalreporter.write_line(line)
