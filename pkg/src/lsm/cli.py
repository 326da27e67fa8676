"""``lsm`` command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on data or validation errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import config as runcfg
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, LsmError
from .evaluation import evaluate, export_report, forecast_tokens, read_report
from .iq import BandPlan, CorpusSpec, SceneSpec, read_iq_record, synth_scene, write_iq_record
from .spectrogram import read_spectrogram, spectrogram_of, split_sequences, write_spectrogram
from .tokenizer import TokenFile, encode_pairs, read_token_file, write_token_file
from .training import (
    compute_band_stats,
    finetune,
    partition_of,
    read_band_stats,
    split_tokens,
    train_partitions,
    write_band_stats,
)

log = logging.getLogger("lsm")

SNAPSHOT = "resolved_config.json"
MODELS_INDEX = "models.json"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# helpers


def _out_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_snapshot(out: Path, args, cfg: dict) -> None:
    """Resolved config next to the outputs: ``<dir>/resolved_config.json`` or ``<file>.config.json``."""
    snap = {"command": args.command, "argv": list(args.argv), **cfg}
    path = out / SNAPSHOT if out.is_dir() else out.with_name(out.name + ".config.json")
    path.write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")


def _created_utc(tokens: np.ndarray, plan: BandPlan) -> datetime:
    """Stamp token files with their newest capture time so reruns give equal bytes."""
    if len(tokens) == 0:
        return datetime(1970, 1, 1, tzinfo=timezone.utc)
    return max(TokenFile(np.asarray(tokens), plan).timestamps())


def _hd_bands(stats_path) -> list[int]:
    if not stats_path:
        return []
    return sorted(b for b, s in read_band_stats(stats_path).items() if s.hd_flag)


def _load_models(path):
    """A single checkpoint file, or a directory written by ``train``/``finetune``."""
    path = Path(path)
    if path.is_dir():
        index = json.loads((path / MODELS_INDEX).read_text())
        models = {part: load_checkpoint(path / name) for part, name in index["models"].items()}
        return models, index.get("hd_bands", [])
    return {"all": load_checkpoint(path)}, []


def _save_models(out: Path, results: dict, hd_bands) -> None:
    index = {"hd_bands": list(hd_bands), "models": {}}
    for part, res in results.items():
        name = f"{part}.ckpt"
        save_checkpoint(res.checkpoint, out / name)
        index["models"][part] = name
    (out / MODELS_INDEX).write_text(json.dumps(index, indent=2) + "\n")


def _find_band_plan(directory: Path):
    path = directory / "band_plan.json"
    if path.exists():
        return BandPlan.from_json(json.loads(path.read_text()))
    return None


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg):
    out = _out_dir(args.out)
    data = json.loads(Path(args.spec).read_text())
    if args.seed is not None:
        scene = data["scene"] if "scene" in data else data
        scene["seed"] = args.seed
    if "scene" in data:
        corpus = CorpusSpec.from_dict(data)
        records = corpus.records()
        plan = corpus.band_plan()
    else:
        rec = synth_scene(SceneSpec.from_dict(data))
        records = [(0, rec)]
        plan = BandPlan((rec.center_freq_hz,))
    count = 0
    for index, rec in records:
        write_iq_record(rec, out / f"rec_{index:05d}.iq")
        count += 1
    (out / "band_plan.json").write_text(json.dumps(plan.to_json()) + "\n")
    _write_snapshot(out, args, cfg)
    log.info("wrote %d records to %s", count, out)


def cmd_preprocess(args, cfg):
    src, out = Path(args.input), _out_dir(args.out)
    pipe = runcfg.pipeline_config(cfg)
    paths = sorted(src.glob("*.iq"))
    if not paths:
        raise LsmError(f"no .iq records in {src}")
    for path in paths:
        spec = spectrogram_of(read_iq_record(path), pipe)
        write_spectrogram(spec, out / f"{path.stem}.spec")
    plan = _find_band_plan(src)
    if plan is not None:
        (out / "band_plan.json").write_text(json.dumps(plan.to_json()) + "\n")
    _write_snapshot(out, args, cfg)
    log.info("preprocessed %d records into %s", len(paths), out)


def cmd_tokenize(args, cfg):
    src = Path(args.input)
    paths = sorted(src.glob("*.spec"))
    if not paths:
        raise LsmError(f"no .spec spectrograms in {src}")
    specs = [read_spectrogram(p) for p in paths]
    if args.plan:
        plan = BandPlan.from_json(json.loads(Path(args.plan).read_text()))
    else:
        plan = _find_band_plan(src) or BandPlan(tuple(sorted({int(s.provenance["center_freq_hz"]) for s in specs})))
    n_in = runcfg.pipeline_config(cfg).n_in
    pairs = [pair for spec in specs for pair in split_sequences(spec, n_in)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    seqs = encode_pairs(pairs, plan)
    write_token_file(out, seqs, plan, preset=cfg["preset"], created_utc=_created_utc(seqs, plan))
    _write_snapshot(out, args, cfg)
    log.info("wrote %d sequences to %s", len(pairs), out)


def cmd_stats(args, cfg):
    out = _out_dir(args.out)
    stats = compute_band_stats(read_token_file(args.tokens))
    write_band_stats(stats, out / "band_stats.json")
    _write_snapshot(out, args, cfg)
    for band, st in stats.items():
        log.info("%d Hz: SD %.3f dB, MAD %.3f dB%s", band, st.sd_db, st.mad_db, " [HD]" if st.hd_flag else "")


def cmd_split(args, cfg):
    out = _out_dir(args.out)
    tokens = read_token_file(args.tokens)
    parts = split_tokens(tokens, cfg["train"]["split"])
    for name, part in zip(("train", "val", "test"), parts):
        write_token_file(out / f"{name}.tok", part.sequences, part.plan, preset=part.preset,
                         created_utc=_created_utc(part.sequences, part.plan))
    _write_snapshot(out, args, cfg)


def cmd_train(args, cfg):
    out = _out_dir(args.out)
    plan = runcfg.train_plan(cfg)
    if args.single_model:
        plan.single_model = True
    hd = _hd_bands(args.stats)
    train_set = read_token_file(args.train)
    val_set = read_token_file(args.val) if args.val else None
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    results = train_partitions(runcfg.model_config(cfg), plan, train_set, val_set, hd, log_path=log_path)
    _save_models(out, results, hd)
    _write_snapshot(out, args, cfg)


def cmd_finetune(args, cfg):
    out = _out_dir(args.out)
    plan = runcfg.train_plan(cfg)
    models, hd = _load_models(args.checkpoint)
    if args.stats:
        hd = _hd_bands(args.stats)
    train_set = read_token_file(args.train)
    val_set = read_token_file(args.val) if args.val else None
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    results = {}
    for part, ckpt in models.items():
        if part == "all":
            tr, va = train_set, val_set
        else:
            tr = train_set.subset(np.flatnonzero(partition_of(train_set.bands(), hd) == part))
            va = None if val_set is None else val_set.subset(
                np.flatnonzero(partition_of(val_set.bands(), hd) == part))
        results[part] = finetune(ckpt, tr, va, plan, hd_bands=hd, log_path=log_path)
    _save_models(out, results, hd)
    _write_snapshot(out, args, cfg)


def cmd_predict(args, cfg):
    ckpts, hd = _load_models(args.model)
    if args.stats:
        hd = _hd_bands(args.stats)
    tokens = read_token_file(args.tokens)
    models = {part: ck.model for part, ck in ckpts.items()}
    forecasts = forecast_tokens(models, tokens, hd)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_token_file(out, forecasts.sequences, forecasts.plan, preset=tokens.preset,
                     created_utc=_created_utc(forecasts.sequences, forecasts.plan))
    _write_snapshot(out, args, cfg)


def cmd_eval(args, cfg):
    out = _out_dir(args.out)
    hd = _hd_bands(args.stats)
    provenance = {"forecasts": Path(args.forecasts).name, "truth": Path(args.truth).name}
    report = evaluate(read_token_file(args.forecasts), read_token_file(args.truth), hd, provenance)
    if args.format in ("json", "both"):
        export_report(report, out / "report.json", "json")
    if args.format in ("csv", "both"):
        export_report(report, out, "csv")
    _write_snapshot(out, args, cfg)
    if report.has_nan():
        raise LsmError("report contains NaN metrics")
    log.info("overall RMSE %.3f dB (persistence %.3f dB), kappa %.3f",
             report.overall_rmse_db or float("nan"), report.overall_persistence_rmse_db or float("nan"),
             report.kappa_overall if report.kappa_overall is not None else float("nan"))


def cmd_export_plots(args, cfg):
    out = _out_dir(args.out)
    report = read_report(args.report)
    export_report(report, out, "csv")
    if args.stats:
        stats = read_band_stats(args.stats)
        lines = ["band_hz,sd_db,mad_db,hd_flag"]
        lines += [f"{b},{s.sd_db!r},{s.mad_db!r},{int(s.hd_flag)}" for b, s in sorted(stats.items())]
        (out / "sd_mad.csv").write_text("\n".join(lines) + "\n")
    _write_snapshot(out, args, cfg)


def cmd_rerun(args, cfg):
    snap = json.loads(Path(args.snapshot).read_text())
    argv = []
    skip = False
    for tok in snap["argv"]:
        if skip:
            skip = False
            continue
        if tok in ("--config", "--set"):
            skip = True
            continue
        argv.append(tok)
    return dispatch(argv + ["--config", str(args.snapshot)])


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "tokenize": cmd_tokenize,
    "stats": cmd_stats,
    "split": cmd_split,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "export-plots": cmd_export_plots,
    "rerun": cmd_rerun,
}


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections model/train/pipeline)")
    common.add_argument("--preset", help="architecture preset (tiny, lsm-gpt, lsm-phi, ...)")
    common.add_argument("--seed", type=int, help="seed for synthesis, initialization and batching")
    common.add_argument("--threads", type=int, help="worker thread cap; 1 gives bit-exact reference runs")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a resolved setting, e.g. train.steps=200")

    parser = Parser(prog="lsm", description="Tokenized PSD forecasting pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("synth", parents=[common], help="synthesize IQ records from a scene spec")
    p.add_argument("--spec", required=True, help="scene or corpus JSON")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("preprocess", parents=[common], help="IQ records -> downsampled spectrograms")
    p.add_argument("--in", dest="input", required=True, help="directory of .iq records")
    p.add_argument("--out", required=True, help="output directory for .spec dumps")

    p = sub.add_parser("tokenize", parents=[common], help="spectrograms -> 292-token sequences")
    p.add_argument("--in", dest="input", required=True, help="directory of .spec dumps")
    p.add_argument("--plan", help="band plan JSON (defaults to band_plan.json next to the inputs)")
    p.add_argument("--out", required=True, help="output token file (.tok)")

    p = sub.add_parser("stats", parents=[common], help="per-band SD/MAD and HD flags")
    p.add_argument("--tokens", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("split", parents=[common], help="chronological train/val/test split")
    p.add_argument("--tokens", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train forecasting model(s)")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--stats", help="band_stats.json; HD bands get their own model")
    p.add_argument("--single-model", action="store_true", help="one model for all bands")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("finetune", parents=[common], help="continue training on a new corpus")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or model directory")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--stats")
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", parents=[common], help="greedy 128-step forecasts")
    p.add_argument("--model", required=True, help="checkpoint file or model directory")
    p.add_argument("--tokens", required=True)
    p.add_argument("--stats")
    p.add_argument("--out", required=True, help="output token file of forecasts")

    p = sub.add_parser("eval", parents=[common], help="RMSE, MAE and weighted kappa report")
    p.add_argument("--forecasts", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--stats")
    p.add_argument("--format", choices=("json", "csv", "both"), default="json")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-plots", parents=[common], help="report -> plot-ready CSV tables")
    p.add_argument("--report", required=True)
    p.add_argument("--stats")
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", parents=[common], help="re-run a stage from its resolved_config.json")
    p.add_argument("snapshot")
    return parser


def dispatch(argv) -> int:
    argv = list(argv)
    parser = build_parser()
    try:
        if not argv:
            parser.print_help(sys.stderr)
            return 1
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        args.argv = argv
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        cfg = runcfg.resolve(args.preset, args.config, overrides)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"lsm: configuration error: {exc}", file=sys.stderr)
        return 1

    torch.set_num_threads(cfg["threads"])
    try:
        result = COMMANDS[args.command](args, cfg)
    except (LsmError, OSError, ValueError, KeyError) as exc:
        print(f"lsm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return result or 0


def main(argv=None) -> int:
    level = os.environ.get("LSM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
