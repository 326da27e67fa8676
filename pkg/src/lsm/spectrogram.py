"""IQ record -> dBm spectrogram -> downsampled forecasting pairs.

The chain is a non-overlapping rectangular-window STFT, per-row max pooling
along time, and a per-row trimmed-mean reduction to a fixed number of slices.
With the default configuration a 1 s, 20 MS/s record goes
256x78,125 -> 256x3,125 -> 256x256.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import InputTooShortError, MetadataError, TruncationError
from .iq import IqRecord, parse_timestamp

EPS = 1e-20
_FRAMES_PER_CHUNK = 8192


@dataclass(eq=False)
class Spectrogram:
    """PSD matrix in dBm; rows are frequency bins (lowest first), columns time slices."""

    values: np.ndarray
    bin_bandwidth_hz: float
    slice_duration_s: float
    provenance: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_slices(self) -> int:
        return self.values.shape[1]

    def _replace(self, values, slice_duration_s):
        return Spectrogram(values, self.bin_bandwidth_hz, slice_duration_s, dict(self.provenance))


@dataclass(frozen=True)
class PipelineConfig:
    n_bins: int = 256
    calibration_offset_db: float = 0.0
    pool_window: int = 25
    pool_stride: int = 25
    out_len: int = 256
    trim_fraction: float = 0.1
    n_in: int = 128

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class ForecastPair:
    """One frequency bin of one record, split into observed input and target."""

    input: np.ndarray
    target: np.ndarray
    bin_index: int
    gain_db: int
    center_freq_hz: int
    timestamp_utc: datetime
    site_id: str = ""

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.input, self.target])


def stft_psd(record: IqRecord, n_s: int = 256, calibration_offset_db: float = 0.0) -> Spectrogram:
    """Non-overlapping STFT of ``record`` in dBm.

    ``PSD[u, v] = 10 log10(|X_v[u]|^2 / n_s + EPS) + calibration_offset_db``
    with rows fft-shifted so that row 0 is -B/2. Trailing samples that do not
    fill a frame are dropped.
    """
    if n_s <= 0:
        raise ValueError("n_s must be positive")
    n_frames = record.n_samples // n_s
    if n_frames == 0:
        raise InputTooShortError(f"record has {record.n_samples} samples, fewer than n_s={n_s}")
    frames = record.samples[: n_frames * n_s].reshape(n_frames, n_s)
    out = np.empty((n_s, n_frames), dtype=np.float64)
    for start in range(0, n_frames, _FRAMES_PER_CHUNK):
        block = frames[start : start + _FRAMES_PER_CHUNK].astype(np.complex128)
        spectrum = np.fft.fftshift(np.fft.fft(block, axis=1), axes=1)
        power = spectrum.real**2 + spectrum.imag**2
        out[:, start : start + block.shape[0]] = (10.0 * np.log10(power / n_s + EPS)).T
    out += calibration_offset_db
    provenance = record.metadata()
    return Spectrogram(
        values=out,
        bin_bandwidth_hz=record.sample_rate_hz / n_s,
        slice_duration_s=n_s / record.sample_rate_hz,
        provenance=provenance,
    )


def maxpool_time(spec: Spectrogram, window: int = 25, stride: int = 25) -> Spectrogram:
    if window <= 0 or stride <= 0:
        raise ValueError("window and stride must be positive")
    n_t = spec.n_slices
    if n_t < window:
        raise InputTooShortError(f"{n_t} time slices, fewer than pooling window {window}")
    n_out = (n_t - window) // stride + 1
    if window == stride:
        pooled = spec.values[:, : n_out * window].reshape(spec.n_bins, n_out, window).max(axis=2)
    else:
        view = np.lib.stride_tricks.sliding_window_view(spec.values, window, axis=1)
        pooled = view[:, ::stride][:, :n_out].max(axis=2)
    return spec._replace(np.ascontiguousarray(pooled), spec.slice_duration_s * stride)


def group_bounds(n_t: int, out_len: int) -> np.ndarray:
    """Group boundaries ``floor(j * n_t / out_len)`` for j = 0..out_len."""
    return (np.arange(out_len + 1) * n_t) // out_len


def trimmed_mean_downsample(
    spec: Spectrogram, out_len: int = 256, trim_fraction: float = 0.1
) -> Spectrogram:
    if out_len <= 0:
        raise ValueError("out_len must be positive")
    if not 0 <= trim_fraction < 0.5:
        raise ValueError(f"trim_fraction must lie in [0, 0.5), got {trim_fraction}")
    n_t = spec.n_slices
    if out_len > n_t:
        raise ValueError(f"out_len={out_len} exceeds {n_t} input slices")
    bounds = group_bounds(n_t, out_len)
    out = np.empty((spec.n_bins, out_len), dtype=np.float64)
    for j in range(out_len):
        group = np.sort(spec.values[:, bounds[j] : bounds[j + 1]], axis=1)
        cut = int(np.floor(trim_fraction * group.shape[1]))
        out[:, j] = group[:, cut : group.shape[1] - cut].mean(axis=1)
    return spec._replace(out, spec.slice_duration_s * n_t / out_len)


def split_sequences(spec: Spectrogram, n_in: int = 128) -> list[ForecastPair]:
    if not 0 < n_in < spec.n_slices:
        raise ValueError(f"n_in must lie in (0, {spec.n_slices}), got {n_in}")
    prov = spec.provenance
    ts = prov.get("timestamp_utc")
    if isinstance(ts, str):
        ts = parse_timestamp(ts)
    return [
        ForecastPair(
            input=spec.values[u, :n_in].copy(),
            target=spec.values[u, n_in:].copy(),
            bin_index=u,
            gain_db=int(prov.get("gain_db", 0)),
            center_freq_hz=int(prov.get("center_freq_hz", 0)),
            timestamp_utc=ts,
            site_id=prov.get("site_id", ""),
        )
        for u in range(spec.n_bins)
    ]


def downsample(record: IqRecord, config: PipelineConfig = PipelineConfig()) -> list[Spectrogram]:
    """All three stages for ``record``: ``[stft, pooled, reduced]``."""
    full = stft_psd(record, config.n_bins, config.calibration_offset_db)
    pooled = maxpool_time(full, config.pool_window, config.pool_stride)
    reduced = trimmed_mean_downsample(pooled, config.out_len, config.trim_fraction)
    return [full, pooled, reduced]


def spectrogram_of(record: IqRecord, config: PipelineConfig = PipelineConfig()) -> Spectrogram:
    return downsample(record, config)[-1]


def preprocess_record(record: IqRecord, config: PipelineConfig = PipelineConfig()) -> list[ForecastPair]:
    return split_sequences(spectrogram_of(record, config), config.n_in)


# --------------------------------------------------------------------------
# intermediate dumps: row-major little-endian float32 + JSON header


def header_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def write_spectrogram(spec: Spectrogram, path) -> None:
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())
    header = {
        "format": "lsm-spectrogram",
        "version": 1,
        "dtype": "f32le",
        "shape": list(spec.shape),
        "bin_bandwidth_hz": spec.bin_bandwidth_hz,
        "slice_duration_s": spec.slice_duration_s,
        "provenance": spec.provenance,
    }
    header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_spectrogram(path) -> Spectrogram:
    path = Path(path)
    try:
        header = json.loads(header_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MetadataError(f"unreadable spectrogram header for {path}: {exc}") from exc
    try:
        rows, cols = header["shape"]
    except (KeyError, ValueError, TypeError) as exc:
        raise MetadataError(f"spectrogram header for {path} lacks a 2-D shape") from exc
    payload = path.read_bytes()
    if len(payload) != 4 * rows * cols:
        raise TruncationError(f"{path}: {len(payload)} bytes, expected {4 * rows * cols}")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return Spectrogram(
        values=values,
        bin_bandwidth_hz=float(header["bin_bandwidth_hz"]),
        slice_duration_s=float(header["slice_duration_s"]),
        provenance=dict(header.get("provenance", {})),
    )
