"""Fixed 128-token vocabulary for PSD sequences with a metadata header.

Sequence layout (292 tokens)::

    [0, 124,
     118 gain 119, 114 freq 115, 116 hi lo 117,
     122 dow 123, 102 day 103, 104 month 105, 106 year 107,
     108 hour 109, 110 minute 111, 112 second 113,
     125, 126, psd_0 ... psd_255, 127]

Value tokens of every field start at 1, so no value collides with the pad
token 0 or with the tags 102..127.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DecodeError, EncodeError, MetadataError, TruncationError
from .iq import BandPlan, format_timestamp, parse_timestamp
from .spectrogram import ForecastPair

PAD = 0
META_BEGIN, META_END = 124, 125
PSD_BEGIN, PSD_END = 126, 127
PSD_MIN_DBM, PSD_MAX_DBM = -118, -18
PSD_TOKEN_MIN, PSD_TOKEN_MAX = 1, 101
PSD_OFFSET = 119
YEAR_MIN, YEAR_MAX = 2016, 2035

N_PSD = 256
N_IN = 128
HEADER_LEN = 35
SEQ_LEN = HEADER_LEN + N_PSD + 1
PSD_START = HEADER_LEN
FORECAST_START = PSD_START + N_IN
PREFIX_LEN = FORECAST_START
VOCAB_SIZE = 128

# (name, begin tag, end tag, number of value tokens, lowest value token, highest)
HEADER_FIELDS = (
    ("gain", 118, 119, 1, 1, 80),
    ("frequency", 114, 115, 1, 1, 33),
    ("bin", 116, 117, 2, 1, 16),
    ("dow", 122, 123, 1, 1, 7),
    ("day", 102, 103, 1, 1, 31),
    ("month", 104, 105, 1, 1, 12),
    ("year", 106, 107, 1, 1, 20),
    ("hour", 108, 109, 1, 1, 24),
    ("minute", 110, 111, 1, 1, 60),
    ("second", 112, 113, 1, 1, 60),
)
FREQ_TOKEN_POS = 6
BIN_TOKEN_POS = (9, 10)


def encode_psd(value_dbm: int) -> int:
    return int(min(max(int(value_dbm), PSD_MIN_DBM), PSD_MAX_DBM)) + PSD_OFFSET


def decode_psd(token: int, offset: int | None = None) -> int:
    token = int(token)
    if not PSD_TOKEN_MIN <= token <= PSD_TOKEN_MAX:
        raise DecodeError(f"token {token} is not a PSD value", offset=offset, field="psd")
    return token - PSD_OFFSET


def encode_psd_array(values_dbm) -> np.ndarray:
    """Vectorised ``encode_psd`` on integer-valued dBm arrays."""
    values = np.asarray(values_dbm)
    return (np.clip(values, PSD_MIN_DBM, PSD_MAX_DBM).astype(np.int64) + PSD_OFFSET).astype(np.uint8)


def decode_psd_array(tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    bad = np.flatnonzero((tokens < PSD_TOKEN_MIN) | (tokens > PSD_TOKEN_MAX))
    if bad.size:
        raise DecodeError(f"token {tokens.flat[bad[0]]} is not a PSD value", offset=int(bad[0]), field="psd")
    return tokens - PSD_OFFSET


def psd_to_integer_dbm(values) -> np.ndarray:
    """Drop the fractional part of each PSD value (truncation toward zero)."""
    return np.trunc(np.asarray(values, dtype=np.float64)).astype(np.int64)


def encode_bin(bin_index: int) -> tuple[int, int]:
    bin_index = int(bin_index)
    if not 0 <= bin_index <= 255:
        raise EncodeError(f"frequency bin {bin_index} outside [0, 255]")
    return bin_index // 16 + 1, bin_index % 16 + 1


def decode_bin(hi: int, lo: int) -> int:
    return (hi - 1) * 16 + (lo - 1)


def day_of_week_token(ts: datetime) -> int:
    """Saturday -> 1, ..., Friday -> 7."""
    return (ts.weekday() + 2) % 7 + 1


@dataclass(frozen=True)
class SequenceMeta:
    gain_db: int
    center_freq_hz: int
    bin_index: int
    timestamp_utc: datetime

    def to_dict(self) -> dict:
        return {
            "gain_db": self.gain_db,
            "center_freq_hz": self.center_freq_hz,
            "bin_index": self.bin_index,
            "timestamp_utc": format_timestamp(self.timestamp_utc),
        }


def encode_header(meta: SequenceMeta, plan: BandPlan) -> list[int]:
    if not 0 <= meta.gain_db <= 79:
        raise EncodeError(f"gain {meta.gain_db} dB outside [0, 79]")
    try:
        freq_token = plan.index(meta.center_freq_hz) + 1
    except KeyError:
        raise EncodeError(f"center frequency {meta.center_freq_hz} Hz not in band plan") from None
    ts = meta.timestamp_utc.astimezone(timezone.utc)
    if not YEAR_MIN <= ts.year <= YEAR_MAX:
        raise EncodeError(f"year {ts.year} outside [{YEAR_MIN}, {YEAR_MAX}]")
    values = {
        "gain": [meta.gain_db + 1],
        "frequency": [freq_token],
        "bin": list(encode_bin(meta.bin_index)),
        "dow": [day_of_week_token(ts)],
        "day": [ts.day],
        "month": [ts.month],
        "year": [ts.year - (YEAR_MIN - 1)],
        "hour": [ts.hour + 1],
        "minute": [ts.minute + 1],
        "second": [ts.second + 1],
    }
    tokens = [PAD, META_BEGIN]
    for name, begin, end, _, _, _ in HEADER_FIELDS:
        tokens += [begin, *values[name], end]
    tokens += [META_END, PSD_BEGIN]
    return tokens


def pair_meta(pair: ForecastPair) -> SequenceMeta:
    return SequenceMeta(pair.gain_db, pair.center_freq_hz, pair.bin_index, pair.timestamp_utc)


def encode_sequence(pair: ForecastPair, plan: BandPlan) -> np.ndarray:
    """Header + 256 PSD tokens (input then target) + closing tag, as uint8."""
    values = pair.values
    if values.size != N_PSD:
        raise EncodeError(f"pair holds {values.size} PSD values, expected {N_PSD}")
    if not np.all(values == np.round(values)):
        raise EncodeError("PSD values must be integers; truncate fractional parts first")
    header = encode_header(pair_meta(pair), plan)
    seq = np.empty(SEQ_LEN, dtype=np.uint8)
    seq[:HEADER_LEN] = header
    seq[PSD_START : PSD_START + N_PSD] = encode_psd_array(values)
    seq[-1] = PSD_END
    return seq


def _expect(tokens, pos, want, field):
    if pos >= len(tokens):
        raise DecodeError("sequence ended early", offset=pos, field=field)
    if int(tokens[pos]) != want:
        raise DecodeError(f"expected tag {want}, found {int(tokens[pos])}", offset=pos, field=field)


def decode_header(tokens: Sequence[int], plan: BandPlan) -> SequenceMeta:
    """Strict left-to-right parse of the 35-token header."""
    _expect(tokens, 0, PAD, "pad")
    _expect(tokens, 1, META_BEGIN, "metadata")
    pos = 2
    fields = {}
    for name, begin, end, width, lo, hi in HEADER_FIELDS:
        _expect(tokens, pos, begin, name)
        vals = []
        for k in range(width):
            tok = int(tokens[pos + 1 + k])
            if not lo <= tok <= hi:
                raise DecodeError(f"value token {tok} outside [{lo}, {hi}]", offset=pos + 1 + k, field=name)
            vals.append(tok)
        _expect(tokens, pos + 1 + width, end, name)
        fields[name] = vals
        pos += width + 2
    _expect(tokens, pos, META_END, "metadata")
    _expect(tokens, pos + 1, PSD_BEGIN, "psd")

    freq_index = fields["frequency"][0] - 1
    if freq_index >= len(plan):
        raise DecodeError(
            f"frequency token {freq_index + 1} beyond a {len(plan)}-band plan",
            offset=FREQ_TOKEN_POS, field="frequency",
        )
    try:
        ts = datetime(
            fields["year"][0] + YEAR_MIN - 1,
            fields["month"][0],
            fields["day"][0],
            fields["hour"][0] - 1,
            fields["minute"][0] - 1,
            fields["second"][0] - 1,
            tzinfo=timezone.utc,
        )
    except ValueError as exc:
        raise DecodeError(f"invalid calendar date: {exc}", field="day") from exc
    if day_of_week_token(ts) != fields["dow"][0]:
        raise DecodeError("day-of-week token disagrees with the date", field="dow")
    return SequenceMeta(
        gain_db=fields["gain"][0] - 1,
        center_freq_hz=plan.freqs_hz[freq_index],
        bin_index=decode_bin(*fields["bin"]),
        timestamp_utc=ts,
    )


def decode_sequence(tokens, plan: BandPlan) -> tuple[SequenceMeta, np.ndarray]:
    tokens = np.asarray(tokens)
    if tokens.shape != (SEQ_LEN,):
        raise DecodeError(f"sequence has shape {tokens.shape}, expected ({SEQ_LEN},)")
    meta = decode_header(tokens, plan)
    psd_tokens = tokens[PSD_START : PSD_START + N_PSD]
    try:
        psd = decode_psd_array(psd_tokens)
    except DecodeError as exc:
        raise DecodeError("bad PSD token", offset=PSD_START + exc.offset, field="psd") from None
    _expect(tokens, SEQ_LEN - 1, PSD_END, "psd")
    return meta, psd


def encode_pairs(pairs: Iterable[ForecastPair], plan: BandPlan) -> np.ndarray:
    """Truncate each pair's PSD values to integers and encode; returns (n, 292) uint8."""
    rows = []
    for pair in pairs:
        whole = ForecastPair(
            input=psd_to_integer_dbm(pair.input).astype(np.float64),
            target=psd_to_integer_dbm(pair.target).astype(np.float64),
            bin_index=pair.bin_index,
            gain_db=pair.gain_db,
            center_freq_hz=pair.center_freq_hz,
            timestamp_utc=pair.timestamp_utc,
            site_id=pair.site_id,
        )
        rows.append(encode_sequence(whole, plan))
    if not rows:
        return np.zeros((0, SEQ_LEN), dtype=np.uint8)
    return np.stack(rows)


# --------------------------------------------------------------------------
# token files: concatenated 292-byte records + JSON manifest


@dataclass
class TokenFile:
    sequences: np.ndarray
    plan: BandPlan
    preset: str | None = None
    created_utc: datetime | None = None

    def __len__(self):
        return self.sequences.shape[0]

    def band_of(self, i: int) -> int:
        return self.plan.freqs_hz[int(self.sequences[i, FREQ_TOKEN_POS]) - 1]

    def bands(self) -> np.ndarray:
        idx = self.sequences[:, FREQ_TOKEN_POS].astype(np.int64) - 1
        return np.asarray(self.plan.freqs_hz, dtype=np.int64)[idx] if idx.size else np.zeros(0, np.int64)

    def timestamps(self) -> list[datetime]:
        return [decode_header(seq, self.plan).timestamp_utc for seq in self.sequences]

    def subset(self, index) -> "TokenFile":
        return TokenFile(self.sequences[np.asarray(index, dtype=np.int64)], self.plan, self.preset, self.created_utc)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def write_token_file(path, sequences, plan: BandPlan, preset: str | None = None,
                     created_utc: datetime | None = None) -> None:
    seqs = np.asarray(sequences)
    if seqs.size == 0:
        seqs = np.zeros((0, SEQ_LEN), dtype=np.uint8)
    if seqs.ndim != 2 or seqs.shape[1] != SEQ_LEN:
        raise EncodeError(f"token array must be (n, {SEQ_LEN}), got {seqs.shape}")
    if seqs.size and (seqs.min() < 0 or seqs.max() >= VOCAB_SIZE):
        raise EncodeError("token outside the 0..127 vocabulary")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(seqs, dtype=np.uint8).tobytes())
    if created_utc is None:
        created_utc = datetime.now(timezone.utc)
    manifest = {
        "format": "lsm-tokens",
        "version": 1,
        "record_length": SEQ_LEN,
        "count": int(seqs.shape[0]),
        "band_plan": plan.to_json(),
        "preset": preset,
        "created_utc": format_timestamp(created_utc),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def read_token_file(path) -> TokenFile:
    path = Path(path)
    try:
        manifest = json.loads(manifest_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MetadataError(f"unreadable token manifest for {path}: {exc}") from exc
    if manifest.get("format") != "lsm-tokens" or manifest.get("record_length") != SEQ_LEN:
        raise MetadataError(f"{path}: not a {SEQ_LEN}-byte token file")
    payload = path.read_bytes()
    if len(payload) % SEQ_LEN:
        raise TruncationError(f"{path}: {len(payload)} bytes is not a multiple of {SEQ_LEN}")
    count = len(payload) // SEQ_LEN
    if count != manifest.get("count"):
        raise TruncationError(f"{path}: manifest says {manifest.get('count')} records, payload holds {count}")
    seqs = np.frombuffer(payload, dtype=np.uint8).reshape(count, SEQ_LEN).copy()
    created = manifest.get("created_utc")
    return TokenFile(
        sequences=seqs,
        plan=BandPlan.from_json(manifest["band_plan"]),
        preset=manifest.get("preset"),
        created_utc=parse_timestamp(created) if created else None,
    )
