"""Autoregressive forecasting and forecast-quality metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DecodeError
from .model import LsmModel
from .tokenizer import (
    FORECAST_START,
    HEADER_FIELDS,
    META_BEGIN,
    META_END,
    N_IN,
    N_PSD,
    PAD,
    PREFIX_LEN,
    PSD_BEGIN,
    PSD_OFFSET,
    PSD_START,
    PSD_TOKEN_MAX,
    PSD_TOKEN_MIN,
    SEQ_LEN,
    TokenFile,
)
from .training import HD, REGULAR, partition_of

N_OUT = N_PSD - N_IN
N_CLASSES = PSD_TOKEN_MAX - PSD_TOKEN_MIN + 1
MAE_THRESHOLD_DB = 5.0
MAE_HIST_EDGES = tuple(float(e) for e in range(0, 21)) + (math.inf,)


def check_prefix(prefix) -> np.ndarray:
    """Validate header framing, the PSD tag and the observed PSD tokens."""
    prefix = np.asarray(prefix)
    if prefix.shape[-1] != PREFIX_LEN:
        raise DecodeError(f"prefix has {prefix.shape[-1]} tokens, expected {PREFIX_LEN}")
    rows = prefix.reshape(-1, PREFIX_LEN)
    expected = {0: PAD, 1: META_BEGIN}
    pos = 2
    for name, begin, end, width, _, _ in HEADER_FIELDS:
        expected[pos] = begin
        expected[pos + width + 1] = end
        pos += width + 2
    expected[pos] = META_END
    expected[pos + 1] = PSD_BEGIN
    for offset, tag in expected.items():
        bad = np.flatnonzero(rows[:, offset] != tag)
        if bad.size:
            raise DecodeError(f"expected tag {tag}, found {int(rows[bad[0], offset])}", offset=offset)
    psd = rows[:, PSD_START:]
    bad = np.argwhere((psd < PSD_TOKEN_MIN) | (psd > PSD_TOKEN_MAX))
    if bad.size:
        raise DecodeError("observed segment holds a non-PSD token", offset=PSD_START + int(bad[0, 1]), field="psd")
    return prefix


@torch.no_grad()
def predict_batch(model: LsmModel, prefixes, n_out: int = N_OUT) -> np.ndarray:
    """Greedy decoding restricted to PSD tokens, one step at a time (key/value cached)."""
    prefixes = check_prefix(np.atleast_2d(prefixes))
    model.eval()
    cache = model.new_cache()
    feed = torch.from_numpy(prefixes.astype(np.int64))
    out = torch.empty(feed.shape[0], n_out, dtype=torch.int64)
    for step in range(n_out):
        logits = model(feed, cache)[:, -1, PSD_TOKEN_MIN : PSD_TOKEN_MAX + 1]
        nxt = logits.argmax(dim=-1) + PSD_TOKEN_MIN
        out[:, step] = nxt
        feed = nxt[:, None]
    return out.numpy().astype(np.uint8)


def predict_sequence(model: LsmModel, prefix) -> np.ndarray:
    return predict_batch(model, np.asarray(prefix)[None])[0]


def forecast_tokens(models: dict, tokens: TokenFile, hd_bands=(), batch_size: int = 256) -> TokenFile:
    """Replace each sequence's target segment with the model forecast.

    ``models`` maps a partition (``"hd"``, ``"regular"`` or ``"all"``) to a
    model; sequences go to their partition's model, else to ``"all"``.
    """
    seqs = tokens.sequences.copy()
    parts = partition_of(tokens.bands(), hd_bands)
    for part in (REGULAR, HD):
        idx = np.flatnonzero(parts == part)
        if idx.size == 0:
            continue
        model = models.get(part, models.get("all"))
        if model is None:
            raise KeyError(f"no model for partition {part!r}")
        for start in range(0, idx.size, batch_size):
            chunk = idx[start : start + batch_size]
            seqs[chunk, FORECAST_START : FORECAST_START + N_OUT] = predict_batch(model, seqs[chunk, :PREFIX_LEN])
    return TokenFile(seqs, tokens.plan, tokens.preset, tokens.created_utc)


def persistence_tokens(tokens: TokenFile) -> TokenFile:
    seqs = tokens.sequences.copy()
    seqs[:, FORECAST_START : FORECAST_START + N_OUT] = seqs[:, FORECAST_START - 1 : FORECAST_START]
    return TokenFile(seqs, tokens.plan, tokens.preset, tokens.created_utc)


def forecast_db(tokens: TokenFile) -> np.ndarray:
    return tokens.sequences[:, FORECAST_START : FORECAST_START + N_OUT].astype(np.float64) - PSD_OFFSET


# --------------------------------------------------------------------------
# metrics


def rmse_per_band(forecasts, targets, bands) -> dict[int, float]:
    """Pooled RMSE (dB) over every forecast position of every sequence in a band."""
    forecasts = np.asarray(forecasts, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    bands = np.asarray(bands)
    if forecasts.shape != targets.shape or forecasts.shape[0] != bands.shape[0]:
        raise ValueError("forecasts, targets and band labels must have matching lengths")
    out = {}
    for band in np.unique(bands):
        err = forecasts[bands == band] - targets[bands == band]
        out[int(band)] = float(np.sqrt(np.mean(err**2)))
    return out


def mae_stats(forecasts, targets, threshold: float = MAE_THRESHOLD_DB) -> tuple[np.ndarray, float]:
    """Per-sequence MAE (dB) and the fraction of sequences with MAE below ``threshold``."""
    err = np.abs(np.asarray(forecasts, dtype=np.float64) - np.asarray(targets, dtype=np.float64))
    maes = err.reshape(err.shape[0], -1).mean(axis=1) if err.size else np.zeros(0)
    frac = float(np.mean(maes < threshold)) if maes.size else float("nan")
    return maes, frac


def kappa_from_confusion(confusion) -> float:
    """Cohen's weighted kappa with linear weights ``|i - j| / (k - 1)``."""
    o = np.asarray(confusion, dtype=np.float64)
    k = o.shape[0]
    if o.shape != (k, k) or k < 2:
        raise ValueError("confusion matrix must be square with at least two classes")
    total = o.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    o = o / total
    e = np.outer(o.sum(axis=1), o.sum(axis=0))
    idx = np.arange(k)
    w = np.abs(idx[:, None] - idx[None, :]) / (k - 1)
    observed = float((w * o).sum())
    chance = float((w * e).sum())
    if chance == 0.0:
        if observed == 0.0:
            return 1.0
        raise ValueError("weighted kappa undefined: chance disagreement is zero")
    return 1.0 - observed / chance


def confusion_matrix(pred_tokens, true_tokens, classes: int = N_CLASSES) -> np.ndarray:
    pred = np.asarray(pred_tokens, dtype=np.int64).ravel() - PSD_TOKEN_MIN
    true = np.asarray(true_tokens, dtype=np.int64).ravel() - PSD_TOKEN_MIN
    if pred.shape != true.shape:
        raise ValueError("prediction and truth lengths differ")
    if pred.size and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= classes):
        raise ValueError(f"tokens must lie in [{PSD_TOKEN_MIN}, {PSD_TOKEN_MIN + classes - 1}]")
    return np.bincount(true * classes + pred, minlength=classes * classes).reshape(classes, classes)


def weighted_kappa(pred_tokens, true_tokens, classes: int = N_CLASSES) -> float:
    """Weighted kappa over the PSD classes; rows of the confusion matrix are truths."""
    return kappa_from_confusion(confusion_matrix(pred_tokens, true_tokens, classes))


# --------------------------------------------------------------------------
# reports


@dataclass
class BandReport:
    band_hz: int
    rmse_db: float
    persistence_rmse_db: float
    n_sequences: int
    mae_mean_db: float
    mae_median_db: float
    mae_p90_db: float
    mae_max_db: float
    frac_mae_below_threshold: float
    hd: bool = False


@dataclass
class EvalReport:
    bands: list[BandReport] = field(default_factory=list)
    overall_rmse_db: float | None = None
    overall_persistence_rmse_db: float | None = None
    overall_frac_mae_below_threshold: float | None = None
    kappa_overall: float | None = None
    kappa_hd: float | None = None
    mae_histogram: list[int] = field(default_factory=lambda: [0] * (len(MAE_HIST_EDGES) - 1))
    threshold_db: float = MAE_THRESHOLD_DB
    rmse_pooling: str = "pooled over all forecast positions of a band"
    provenance: dict = field(default_factory=dict)
    generation: dict = field(default_factory=lambda: {
        "decoding": "greedy", "token_range": [PSD_TOKEN_MIN, PSD_TOKEN_MAX], "n_out": N_OUT,
    })

    def metrics(self) -> list[float]:
        vals = [self.overall_rmse_db, self.overall_persistence_rmse_db,
                self.overall_frac_mae_below_threshold, self.kappa_overall, self.kappa_hd]
        for b in self.bands:
            vals += [b.rmse_db, b.persistence_rmse_db, b.frac_mae_below_threshold, b.mae_mean_db]
        return [v for v in vals if v is not None]

    def has_nan(self) -> bool:
        return any(isinstance(v, float) and math.isnan(v) for v in self.metrics())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mae_histogram"] = {
            "edges_db": [e if math.isfinite(e) else None for e in MAE_HIST_EDGES],
            "counts": list(self.mae_histogram),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["bands"] = [BandReport(**b) for b in d.get("bands", [])]
        d["mae_histogram"] = list(d["mae_histogram"]["counts"])
        return cls(**d)


def mae_histogram(maes) -> list[int]:
    counts, _ = np.histogram(np.asarray(maes, dtype=np.float64), bins=np.array(MAE_HIST_EDGES))
    return [int(c) for c in counts]


def evaluate(forecasts: TokenFile, truth: TokenFile, hd_bands=(), provenance=None) -> EvalReport:
    """Metrics of ``forecasts`` against ``truth`` plus the persistence baseline."""
    if forecasts.sequences.shape != truth.sequences.shape:
        raise ValueError("forecast and truth token files differ in shape")
    if not np.array_equal(forecasts.sequences[:, :PREFIX_LEN], truth.sequences[:, :PREFIX_LEN]):
        raise ValueError("forecast prefixes do not match the truth sequences")
    report = EvalReport(provenance=dict(provenance or {}))
    if len(truth) == 0:
        return report
    pred = forecast_db(forecasts)
    true = forecast_db(truth)
    base = forecast_db(persistence_tokens(truth))
    bands = truth.bands()
    rmse = rmse_per_band(pred, true, bands)
    base_rmse = rmse_per_band(base, true, bands)
    maes, frac = mae_stats(pred, true)
    hd_set = {int(b) for b in hd_bands}
    for band in sorted(rmse):
        sel = bands == band
        m = maes[sel]
        report.bands.append(BandReport(
            band_hz=band,
            rmse_db=rmse[band],
            persistence_rmse_db=base_rmse[band],
            n_sequences=int(sel.sum()),
            mae_mean_db=float(m.mean()),
            mae_median_db=float(np.median(m)),
            mae_p90_db=float(np.percentile(m, 90)),
            mae_max_db=float(m.max()),
            frac_mae_below_threshold=float(np.mean(m < MAE_THRESHOLD_DB)),
            hd=band in hd_set,
        ))
    report.overall_rmse_db = float(np.sqrt(np.mean((pred - true) ** 2)))
    report.overall_persistence_rmse_db = float(np.sqrt(np.mean((base - true) ** 2)))
    report.overall_frac_mae_below_threshold = frac
    report.mae_histogram = mae_histogram(maes)
    pred_tok = pred + PSD_OFFSET
    true_tok = true + PSD_OFFSET
    report.kappa_overall = weighted_kappa(pred_tok, true_tok)
    hd_sel = np.isin(bands, list(hd_set))
    if hd_sel.any():
        report.kappa_hd = weighted_kappa(pred_tok[hd_sel], true_tok[hd_sel])
    return report


RMSE_COLUMNS = ("band_hz", "rmse_db", "n")
MAE_COLUMNS = ("mae_lo_db", "mae_hi_db", "count")
KAPPA_COLUMNS = ("subset", "kappa")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def export_report(report: EvalReport, path, fmt: str = "json") -> list[Path]:
    """Write ``report`` as one JSON file, or as a directory of CSV tables.

    CSV tables: ``rmse_per_band.csv`` (band_hz, rmse_db, n),
    ``mae_histogram.csv`` (mae_lo_db, mae_hi_db, count; an empty upper edge is
    open-ended) and ``kappa.csv`` (subset, kappa).
    """
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        return [path]
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    path.mkdir(parents=True, exist_ok=True)
    rmse_rows = [(b.band_hz, repr(b.rmse_db), b.n_sequences) for b in report.bands]
    hist_rows = []
    if report.bands:
        for lo, hi, c in zip(MAE_HIST_EDGES[:-1], MAE_HIST_EDGES[1:], report.mae_histogram):
            hist_rows.append((repr(lo), repr(hi) if math.isfinite(hi) else "", c))
    kappa_rows = []
    if report.kappa_overall is not None:
        kappa_rows.append(("overall", repr(report.kappa_overall)))
    if report.kappa_hd is not None:
        kappa_rows.append(("hd", repr(report.kappa_hd)))
    files = [path / "rmse_per_band.csv", path / "mae_histogram.csv", path / "kappa.csv"]
    _write_csv(files[0], RMSE_COLUMNS, rmse_rows)
    _write_csv(files[1], MAE_COLUMNS, hist_rows)
    _write_csv(files[2], KAPPA_COLUMNS, kappa_rows)
    return files


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
