"""Band statistics, highly-dispersed band detection, splits and the training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .errors import ConfigError, TrainingError
from .model import LsmConfig, LsmModel, build_model, forecast_mask, loss_terms
from .tokenizer import N_PSD, PSD_OFFSET, PSD_START, SEQ_LEN, TokenFile

log = logging.getLogger(__name__)

HD, REGULAR = "hd", "regular"


# --------------------------------------------------------------------------
# dispersion statistics


@dataclass
class BandStats:
    band_hz: int
    sd_db: float
    mad_db: float
    count: int
    hd_flag: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _psd_db(sequences: np.ndarray) -> np.ndarray:
    return sequences[:, PSD_START : PSD_START + N_PSD].astype(np.float64) - PSD_OFFSET


def stats_from_values(values_by_band: dict) -> dict[int, BandStats]:
    """Population SD and mean absolute deviation (about the mean) per band."""
    out = {}
    for band, values in sorted(values_by_band.items()):
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            log.warning("band %s has no PSD values; excluded from statistics", band)
            continue
        mean = v.mean()
        out[int(band)] = BandStats(int(band), float(v.std()), float(np.abs(v - mean).mean()), int(v.size))
    if len(out) >= 3:
        hd, _ = detect_hd(out)
        for band, st in out.items():
            st.hd_flag = band in hd
    return out


def compute_band_stats(tokens: TokenFile) -> dict[int, BandStats]:
    bands = tokens.bands()
    psd = _psd_db(tokens.sequences)
    values = {}
    for band in tokens.plan.freqs_hz:
        sel = bands == band
        if not sel.any():
            log.warning("band %d Hz has no sequences; excluded from statistics", band)
            continue
        values[band] = psd[sel]
    return stats_from_values(values)


def _outliers(x: np.ndarray, k: float) -> np.ndarray:
    med = np.median(x)
    spread = np.median(np.abs(x - med))
    return x > med + k * spread


def detect_hd(stats: dict[int, BandStats], k: float = 3.0) -> tuple[list[int], list[int]]:
    """Split bands into (highly dispersed, regular).

    A band is highly dispersed when its SD, or its MAD, exceeds the cross-band
    median by more than ``k`` median absolute deviations.
    """
    bands = sorted(stats)
    if len(bands) < 3:
        raise ValueError("HD detection needs at least three bands")
    sd = np.array([stats[b].sd_db for b in bands])
    mad = np.array([stats[b].mad_db for b in bands])
    flagged = _outliers(sd, k) | _outliers(mad, k)
    hd = [b for b, f in zip(bands, flagged) if f]
    regular = [b for b, f in zip(bands, flagged) if not f]
    return hd, regular


def write_band_stats(stats: dict[int, BandStats], path) -> None:
    hd = sorted(b for b, s in stats.items() if s.hd_flag)
    data = {"bands": [stats[b].to_dict() for b in sorted(stats)], "hd_bands": hd}
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def read_band_stats(path) -> dict[int, BandStats]:
    data = json.loads(Path(path).read_text())
    return {int(b["band_hz"]): BandStats(**b) for b in data["bands"]}


# --------------------------------------------------------------------------
# chronological split


def chronological_split(timestamps: Sequence, fractions=(0.8, 0.1, 0.1)) -> list[np.ndarray]:
    """Index arrays for contiguous time-ordered partitions.

    Sorting is stable, so equal timestamps keep their original order.
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must be positive and sum to 1, got {fractions}")
    n, k = len(timestamps), len(fractions)
    if n < k:
        raise ValueError(f"{n} sequences cannot fill {k} partitions")
    keys = np.array([t.timestamp() if hasattr(t, "timestamp") else t for t in timestamps], dtype=np.float64)
    order = np.argsort(keys, kind="stable")
    cum = np.cumsum(fractions)[:-1]
    bounds = [int(round(n * c)) for c in cum]
    # every partition keeps at least one element
    for i in range(len(bounds)):
        lo = (bounds[i - 1] if i else 0) + 1
        hi = n - (len(bounds) - i)
        bounds[i] = min(max(bounds[i], lo), hi)
    return np.split(order, bounds)


def split_tokens(tokens: TokenFile, fractions=(0.8, 0.1, 0.1)) -> list[TokenFile]:
    return [tokens.subset(idx) for idx in chronological_split(tokens.timestamps(), fractions)]


# --------------------------------------------------------------------------
# training


@dataclass
class TrainPlan:
    alpha_hd: float = 0.1
    alpha_regular: float = 1.0
    alpha_override: float | None = None
    lr: float = 3e-4
    min_lr_ratio: float = 0.1
    warmup_steps: int = 0
    batch_size: int = 16
    steps: int = 1000
    eval_every: int = 100
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    single_model: bool = False

    def __post_init__(self):
        self.split = tuple(self.split)
        for a in (self.alpha_hd, self.alpha_regular) + (
            (self.alpha_override,) if self.alpha_override is not None else ()
        ):
            if not 0 <= a <= 1:
                raise ConfigError(f"alpha must lie in [0, 1], got {a}")
        if not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise ConfigError("split fractions must sum to 1")
        if self.steps < 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ConfigError("steps must be >= 0; batch_size and eval_every must be positive")

    def alpha_for(self, partition: str) -> float:
        if self.alpha_override is not None:
            return float(self.alpha_override)
        return float(self.alpha_hd if partition == HD else self.alpha_regular)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainPlan":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train plan keys {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[tuple[int, float]] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)


def partition_of(bands: np.ndarray, hd_bands) -> np.ndarray:
    hd = np.isin(bands, np.asarray(list(hd_bands), dtype=np.int64))
    return np.where(hd, HD, REGULAR)


def lr_at(plan: TrainPlan, step: int) -> float:
    if plan.warmup_steps and step < plan.warmup_steps:
        return plan.lr * (step + 1) / plan.warmup_steps
    span = max(plan.steps - plan.warmup_steps, 1)
    progress = min((step - plan.warmup_steps) / span, 1.0)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return plan.lr * (plan.min_lr_ratio + (1.0 - plan.min_lr_ratio) * cosine)


@torch.no_grad()
def evaluate_loss(model: LsmModel, sequences: np.ndarray, alpha: float, batch_size: int = 64) -> float:
    """Size-weighted mean of per-batch hybrid losses in eval mode."""
    if len(sequences) == 0:
        return float("nan")
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(sequences), batch_size):
        batch = torch.from_numpy(np.asarray(sequences[start : start + batch_size], dtype=np.int64))
        logits = model(batch[:, :-1])
        ce, rms = loss_terms(logits, batch[:, 1:], forecast_mask(batch.shape[0], SEQ_LEN - 1))
        total += float(alpha * ce + (1.0 - alpha) * rms) * batch.shape[0]
        count += batch.shape[0]
    model.train(was_training)
    return total / count


def _val_loss(model, val: TokenFile | None, plan, hd_bands) -> float:
    if val is None or len(val) == 0:
        return float("nan")
    parts = partition_of(val.bands(), hd_bands)
    total, count = 0.0, 0
    for part in (REGULAR, HD):
        sel = parts == part
        if sel.any():
            loss = evaluate_loss(model, val.sequences[sel], plan.alpha_for(part), plan.batch_size)
            total += loss * int(sel.sum())
            count += int(sel.sum())
    return total / count


def train(
    model: LsmModel,
    plan: TrainPlan,
    train_set: TokenFile,
    val_set: TokenFile | None = None,
    *,
    hd_bands=(),
    log_path=None,
    metadata: dict | None = None,
) -> TrainResult:
    """Optimise ``model`` in place and return the best-validation checkpoint.

    Each batch is drawn from a single partition (HD or regular) so the whole
    step uses that partition's alpha.
    """
    if len(train_set) == 0 and plan.steps > 0:
        raise ConfigError("training set is empty")
    if train_set.sequences.shape[1:] != (SEQ_LEN,) or model.config.max_seq_len < SEQ_LEN:
        raise ConfigError(f"model and data disagree on the {SEQ_LEN}-token sequence layout")
    torch.manual_seed(plan.seed)
    rng = np.random.default_rng(plan.seed)
    parts = partition_of(train_set.bands(), hd_bands)
    pools = {p: np.flatnonzero(parts == p) for p in (REGULAR, HD)}
    pools = {p: idx for p, idx in pools.items() if idx.size}
    names = list(pools)
    weights = np.array([pools[p].size for p in names], dtype=np.float64)
    weights /= max(weights.sum(), 1.0)

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=plan.lr, betas=(0.9, 0.95), eps=1e-8, weight_decay=plan.weight_decay
    )
    log_file = open(log_path, "a") if log_path else None
    result = TrainResult(checkpoint=None)
    best_val = _val_loss(model, val_set, plan, hd_bands)
    best_step = 0
    best_state = copy.deepcopy(model.state_dict())
    result.val_losses.append((0, best_val))

    def emit(entry):
        result.log.append(entry)
        if log_file:
            log_file.write(json.dumps(entry) + "\n")

    try:
        model.train()
        for step in range(plan.steps):
            part = names[int(rng.choice(len(names), p=weights))] if len(names) > 1 else names[0]
            pool = pools[part]
            idx = rng.choice(pool.size, size=min(plan.batch_size, pool.size), replace=False)
            batch = torch.from_numpy(train_set.sequences[pool[np.sort(idx)]].astype(np.int64))
            alpha = plan.alpha_for(part)
            lr = lr_at(plan, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            logits = model(batch[:, :-1])
            ce, rms = loss_terms(logits, batch[:, 1:], forecast_mask(batch.shape[0], SEQ_LEN - 1))
            loss = alpha * ce + (1.0 - alpha) * rms
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at step {step}: ce={float(ce.detach())} rms={float(rms.detach())} "
                    f"partition={part} lr={lr}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if plan.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), plan.grad_clip)
            optimizer.step()
            result.train_losses.append(float(loss.detach()))
            entry = {"step": step + 1, "partition": part, "alpha": alpha, "loss": float(loss.detach()),
                     "ce": float(ce.detach()), "rms": float(rms.detach()), "lr": lr}
            if (step + 1) % plan.eval_every == 0 or step + 1 == plan.steps:
                val = _val_loss(model, val_set, plan, hd_bands)
                result.val_losses.append((step + 1, val))
                entry["val_loss"] = val
                if math.isnan(best_val) or val < best_val:
                    best_val, best_step = val, step + 1
                    best_state = copy.deepcopy(model.state_dict())
                model.train()
            emit(entry)
    finally:
        if log_file:
            log_file.close()

    if val_set is None or len(val_set) == 0:
        best_state, best_step = copy.deepcopy(model.state_dict()), plan.steps
    model.load_state_dict(best_state)
    model.eval()
    meta = dict(metadata or {})
    meta.update(
        step=best_step,
        seed=plan.seed,
        best_val_loss=None if math.isnan(best_val) else best_val,
        loss_history=result.train_losses,
        plan=plan.to_dict(),
    )
    result.checkpoint = Checkpoint.from_model(model, metadata=meta)
    return result


def train_partitions(
    config: LsmConfig,
    plan: TrainPlan,
    train_set: TokenFile,
    val_set: TokenFile | None,
    hd_bands=(),
    *,
    log_path=None,
) -> dict[str, TrainResult]:
    """Separate HD and regular models, or one model when ``plan.single_model``."""
    if plan.single_model or not hd_bands:
        model = build_model(config, plan.seed)
        return {"all": train(model, plan, train_set, val_set, hd_bands=hd_bands, log_path=log_path,
                             metadata={"partition": "all"})}
    results = {}
    for part in (REGULAR, HD):
        tr = train_set.subset(np.flatnonzero(partition_of(train_set.bands(), hd_bands) == part))
        va = None
        if val_set is not None:
            va = val_set.subset(np.flatnonzero(partition_of(val_set.bands(), hd_bands) == part))
        if len(tr) == 0:
            log.warning("no %s training sequences; skipping that model", part)
            continue
        model = build_model(config, plan.seed)
        results[part] = train(model, plan, tr, va, hd_bands=hd_bands, log_path=log_path,
                              metadata={"partition": part})
    return results


def finetune(
    checkpoint: Checkpoint,
    train_set: TokenFile,
    val_set: TokenFile | None,
    plan: TrainPlan,
    *,
    hd_bands=(),
    expected_config: LsmConfig | None = None,
    log_path=None,
) -> TrainResult:
    """Continue optimisation of ``checkpoint`` on a new corpus with a fresh optimizer."""
    if expected_config is not None and expected_config != checkpoint.config:
        raise ConfigError("fine-tuning config does not match the checkpoint")
    model = checkpoint.model
    meta = {k: v for k, v in checkpoint.metadata.items() if k not in ("loss_history", "plan")}
    meta["finetuned_from_step"] = checkpoint.metadata.get("step")
    return train(model, plan, train_set, val_set, hd_bands=hd_bands, log_path=log_path, metadata=meta)
