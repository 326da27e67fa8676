"""Raw IQ recordings: on-disk format, band plans and synthetic RF scenes.

A recording is stored as two files: the payload, a raw stream of interleaved
little-endian float32 ``(I, Q)`` pairs, and a JSON sidecar next to it (same
stem, ``.json`` suffix) carrying the capture metadata.

Synthetic scenes are calibrated against the STFT power spectral density used
by :mod:`lsm.spectrogram`: a component with ``power_dbm = P`` reads ``P`` dBm
in every STFT bin it occupies, and the noise floor reads ``noise_floor_dbm``
in every bin (in the linear mean).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import MetadataError, SpecError, TruncationError

GAIN_RANGE_DB = (0, 79)
MAX_BANDS = 33
SUB_GHZ_RANGE_HZ = (54_000_000, 990_000_000)
SIDECAR_KEYS = (
    "site_id",
    "center_freq_hz",
    "sample_rate_hz",
    "gain_db",
    "timestamp_utc",
    "duration_s",
)
COMPONENT_KINDS = ("tone", "burst", "ofdm_block")


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 instant; a missing offset is taken as UTC."""
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


@dataclass(eq=False)
class IqRecord:
    """One complex-baseband capture plus its metadata."""

    site_id: str
    center_freq_hz: int
    sample_rate_hz: int
    gain_db: int
    timestamp_utc: datetime
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.complex64)
        if self.samples.ndim != 1:
            raise MetadataError("samples must be a 1-D sequence")
        if self.samples.size == 0:
            raise MetadataError("record holds no samples (N=0)")
        if int(self.sample_rate_hz) <= 0:
            raise MetadataError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        lo, hi = GAIN_RANGE_DB
        if not lo <= int(self.gain_db) <= hi:
            raise MetadataError(f"gain_db must lie in [{lo}, {hi}], got {self.gain_db}")
        if self.timestamp_utc.tzinfo is None:
            raise MetadataError("timestamp_utc must be timezone-aware")
        self.timestamp_utc = self.timestamp_utc.astimezone(timezone.utc).replace(microsecond=0)
        self.center_freq_hz = int(self.center_freq_hz)
        self.sample_rate_hz = int(self.sample_rate_hz)
        self.gain_db = int(self.gain_db)

    @property
    def n_samples(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def metadata(self) -> dict:
        return {
            "site_id": self.site_id,
            "center_freq_hz": self.center_freq_hz,
            "sample_rate_hz": self.sample_rate_hz,
            "gain_db": self.gain_db,
            "timestamp_utc": format_timestamp(self.timestamp_utc),
            "duration_s": self.duration_s,
        }

    def __eq__(self, other):
        if not isinstance(other, IqRecord):
            return NotImplemented
        return self.metadata() == other.metadata() and np.array_equal(
            self.samples.view(np.uint64), other.samples.view(np.uint64)
        )


@dataclass(frozen=True)
class BandPlan:
    """Ascending, unique list of center frequencies (Hz)."""

    freqs_hz: tuple[int, ...]

    def __post_init__(self):
        freqs = tuple(int(f) for f in self.freqs_hz)
        object.__setattr__(self, "freqs_hz", freqs)
        if not 1 <= len(freqs) <= MAX_BANDS:
            raise MetadataError(f"band plan needs 1..{MAX_BANDS} bands, got {len(freqs)}")
        if any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise MetadataError("band plan frequencies must be strictly ascending")

    def __len__(self):
        return len(self.freqs_hz)

    def index(self, freq_hz: int) -> int:
        try:
            return self.freqs_hz.index(int(freq_hz))
        except ValueError:
            raise KeyError(freq_hz) from None

    def __contains__(self, freq_hz) -> bool:
        return int(freq_hz) in self.freqs_hz

    @property
    def within_sub_ghz_range(self) -> bool:
        lo, hi = SUB_GHZ_RANGE_HZ
        return all(lo <= f <= hi for f in self.freqs_hz)

    def to_json(self) -> list[int]:
        return list(self.freqs_hz)

    @classmethod
    def from_json(cls, data) -> "BandPlan":
        if isinstance(data, dict):
            data = data["freqs_hz"]
        return cls(tuple(data))


# --------------------------------------------------------------------------
# file format


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_iq_record(record: IqRecord, path) -> None:
    path = Path(path)
    interleaved = np.empty(2 * record.n_samples, dtype="<f4")
    interleaved[0::2] = record.samples.real
    interleaved[1::2] = record.samples.imag
    path.write_bytes(interleaved.tobytes())
    sidecar_path(path).write_text(json.dumps(record.metadata(), indent=2) + "\n")


def _load_sidecar(path: Path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise MetadataError(f"missing sidecar metadata {side}")
    try:
        meta = json.loads(side.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MetadataError(f"unreadable sidecar {side}: {exc}") from exc
    if not isinstance(meta, dict):
        raise MetadataError(f"sidecar {side} is not a JSON object")
    missing = [k for k in SIDECAR_KEYS if k not in meta]
    if missing:
        raise MetadataError(f"sidecar {side} lacks keys {missing}")
    for key in ("center_freq_hz", "sample_rate_hz", "gain_db"):
        if not isinstance(meta[key], int) or isinstance(meta[key], bool):
            raise MetadataError(f"sidecar field {key} must be an integer")
    if not isinstance(meta["duration_s"], (int, float)) or meta["duration_s"] <= 0:
        raise MetadataError("sidecar field duration_s must be a positive number")
    if not isinstance(meta["site_id"], str):
        raise MetadataError("sidecar field site_id must be text")
    try:
        meta["timestamp_utc"] = parse_timestamp(meta["timestamp_utc"])
    except (TypeError, ValueError) as exc:
        raise MetadataError(f"bad timestamp_utc in {side}: {exc}") from exc
    return meta


def read_iq_record(path) -> IqRecord:
    path = Path(path)
    meta = _load_sidecar(path)
    payload = path.read_bytes()
    if len(payload) % 8:
        raise TruncationError(
            f"{path}: payload of {len(payload)} bytes is not a whole number of IQ pairs"
        )
    raw = np.frombuffer(payload, dtype="<f4")
    samples = np.empty(raw.size // 2, dtype=np.complex64)
    samples.real = raw[0::2]
    samples.imag = raw[1::2]
    expected = meta["sample_rate_hz"] * meta["duration_s"]
    if samples.size == 0 or abs(samples.size - expected) > 1e-6 * max(expected, 1.0):
        raise MetadataError(
            f"{path}: {samples.size} samples but sidecar implies "
            f"{meta['sample_rate_hz']} Hz x {meta['duration_s']} s"
        )
    return IqRecord(
        site_id=meta["site_id"],
        center_freq_hz=meta["center_freq_hz"],
        sample_rate_hz=meta["sample_rate_hz"],
        gain_db=meta["gain_db"],
        timestamp_utc=meta["timestamp_utc"],
        samples=samples,
    )


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Component:
    """One emitter in a synthetic scene.

    ``start_hz``/``stop_hz`` are baseband offsets; a tone sits at ``start_hz``.
    ``power_dbm`` is the level the emitter reads in each STFT bin it occupies
    (for a burst, while it is on). Bursts are gated block emitters that are on
    for ``duty_cycle * period_s`` out of every ``period_s``, shifted by
    ``phase_s``.
    """

    kind: str
    start_hz: float
    stop_hz: float
    power_dbm: float
    period_s: float | None = None
    duty_cycle: float = 1.0
    phase_s: float = 0.0

    @classmethod
    def from_dict(cls, data: dict) -> "Component":
        data = dict(data)
        if data.get("kind") == "tone" and "stop_hz" not in data:
            data["stop_hz"] = data["start_hz"]
        try:
            return cls(**data)
        except TypeError as exc:
            raise SpecError(f"bad component {data}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "start_hz": self.start_hz,
            "stop_hz": self.stop_hz,
            "power_dbm": self.power_dbm,
            "period_s": self.period_s,
            "duty_cycle": self.duty_cycle,
            "phase_s": self.phase_s,
        }


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    duration_s: float
    sample_rate_hz: int
    noise_floor_dbm: float | None = -100.0
    components: tuple[Component, ...] = ()
    sinr_db: float | None = None
    fft_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        data["components"] = tuple(
            c if isinstance(c, Component) else Component.from_dict(c)
            for c in data.get("components", ())
        )
        try:
            spec = cls(**data)
        except TypeError as exc:
            raise SpecError(f"bad scene spec: {exc}") from exc
        return spec

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "duration_s": self.duration_s,
            "sample_rate_hz": self.sample_rate_hz,
            "noise_floor_dbm": self.noise_floor_dbm,
            "components": [c.to_dict() for c in self.components],
            "sinr_db": self.sinr_db,
            "fft_size": self.fft_size,
        }

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))

    def validate(self) -> None:
        if self.sample_rate_hz <= 0 or self.duration_s <= 0:
            raise SpecError("sample_rate_hz and duration_s must be positive")
        exact = self.duration_s * self.sample_rate_hz
        if self.n_samples < 1 or abs(exact - self.n_samples) > 1e-6:
            raise SpecError(f"duration x sample rate = {exact} is not a whole sample count")
        if self.fft_size < 2:
            raise SpecError("fft_size must be at least 2")
        nyquist = self.sample_rate_hz / 2
        for comp in self.components:
            if comp.kind not in COMPONENT_KINDS:
                raise SpecError(f"unknown component kind {comp.kind!r}")
            for f in (comp.start_hz, comp.stop_hz):
                if not -nyquist <= f <= nyquist:
                    raise SpecError(
                        f"component offset {f} Hz outside Nyquist span +/-{nyquist} Hz"
                    )
            if comp.stop_hz < comp.start_hz:
                raise SpecError("component stop_hz must not be below start_hz")
            if not 0 < comp.duty_cycle <= 1:
                raise SpecError(f"duty cycle must lie in (0, 1], got {comp.duty_cycle}")
            if comp.kind == "burst" and (comp.period_s is None or comp.period_s <= 0):
                raise SpecError("burst components need a positive period_s")
            if not math.isfinite(comp.power_dbm):
                raise SpecError("component power must be finite")
        if self.sinr_db is not None and not self.components:
            raise SpecError("sinr_db needs at least one signal component")


def dbm_to_lin(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def occupied_rows(comp: Component, sample_rate_hz: int, fft_size: int) -> np.ndarray:
    """STFT rows (fft-shifted, row 0 = lowest frequency) covered by ``comp``."""
    spacing = sample_rate_hz / fft_size
    centers = (np.arange(fft_size) - fft_size // 2) * spacing
    if comp.kind == "tone":
        return np.array([int(np.argmin(np.abs(centers - comp.start_hz)))])
    rows = np.flatnonzero((centers >= comp.start_hz) & (centers <= comp.stop_hz))
    if rows.size == 0:
        mid = 0.5 * (comp.start_hz + comp.stop_hz)
        rows = np.array([int(np.argmin(np.abs(centers - mid)))])
    return rows


def tone_amplitude(comp: Component, fft_size: int) -> float:
    """Peak amplitude A of a tone; its average complex power is A**2 / 2."""
    return math.sqrt(2.0 * dbm_to_lin(comp.power_dbm) / fft_size)


def _render_tone(comp, n, fs, fft_size, rng):
    amp = tone_amplitude(comp, fft_size)
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n, dtype=np.float64)
    return (amp / math.sqrt(2.0)) * np.exp(1j * (2.0 * np.pi * comp.start_hz / fs * t + phase0))


def _render_block(comp, n, fs, fft_size, rng):
    # constant-modulus QPSK symbols on the occupied bins, one symbol per frame
    rows = occupied_rows(comp, fs, fft_size)
    bins = (rows - fft_size // 2) % fft_size
    n_frames = -(-n // fft_size)
    mag = math.sqrt(fft_size * dbm_to_lin(comp.power_dbm))
    quadrant = rng.integers(0, 4, size=(n_frames, bins.size))
    spectrum = np.zeros((n_frames, fft_size), dtype=np.complex128)
    spectrum[:, bins] = mag * np.exp(1j * (np.pi / 4 + np.pi / 2 * quadrant))
    x = np.fft.ifft(spectrum, axis=1).reshape(-1)[:n]
    if comp.kind == "burst":
        t = np.arange(n, dtype=np.float64) / fs - comp.phase_s
        on = np.mod(t, comp.period_s) < comp.duty_cycle * comp.period_s
        x = x * on
    return x


def mean_occupied_signal_level(spec: SceneSpec) -> float:
    """Time-averaged linear per-bin signal level over the union of occupied bins."""
    level = np.zeros(spec.fft_size)
    occupied = np.zeros(spec.fft_size, dtype=bool)
    for comp in spec.components:
        rows = occupied_rows(comp, spec.sample_rate_hz, spec.fft_size)
        duty = comp.duty_cycle if comp.kind == "burst" else 1.0
        level[rows] += dbm_to_lin(comp.power_dbm) * duty
        occupied[rows] = True
    return float(level[occupied].mean())


def noise_variance(spec: SceneSpec) -> float:
    """Complex noise variance; with ``sinr_db`` set it overrides the noise floor."""
    if spec.sinr_db is not None:
        return mean_occupied_signal_level(spec) / dbm_to_lin(spec.sinr_db)
    if spec.noise_floor_dbm is None:
        return 0.0
    return dbm_to_lin(spec.noise_floor_dbm)


def synthesize_baseband(spec: SceneSpec) -> np.ndarray:
    """Complex128 baseband for ``spec``; a pure function of ``spec`` including its seed."""
    spec.validate()
    n = spec.n_samples
    fs = spec.sample_rate_hz
    streams = np.random.SeedSequence(spec.seed).spawn(len(spec.components) + 1)
    x = np.zeros(n, dtype=np.complex128)
    for comp, stream in zip(spec.components, streams[1:]):
        rng = np.random.default_rng(stream)
        if comp.kind == "tone":
            x += _render_tone(comp, n, fs, spec.fft_size, rng)
        else:
            x += _render_block(comp, n, fs, spec.fft_size, rng)
    var = noise_variance(spec)
    if var > 0:
        rng = np.random.default_rng(streams[0])
        scale = math.sqrt(var / 2.0)
        noise = rng.standard_normal((n, 2))
        x += scale * (noise[:, 0] + 1j * noise[:, 1])
    return x


def synth_scene(
    spec: SceneSpec,
    *,
    site_id: str = "synthetic",
    center_freq_hz: int = 630_000_000,
    gain_db: int = 0,
    timestamp_utc: datetime | None = None,
) -> IqRecord:
    if timestamp_utc is None:
        timestamp_utc = datetime(2023, 6, 1, tzinfo=timezone.utc)
    return IqRecord(
        site_id=site_id,
        center_freq_hz=center_freq_hz,
        sample_rate_hz=spec.sample_rate_hz,
        gain_db=gain_db,
        timestamp_utc=timestamp_utc,
        samples=synthesize_baseband(spec).astype(np.complex64),
    )


# --------------------------------------------------------------------------
# multi-record corpora (driven by the `synth` subcommand)


@dataclass
class CorpusSpec:
    """A family of scenes: ``records_per_band`` captures for every band.

    ``bands`` entries may override ``components`` and ``noise_floor_dbm`` of
    the base scene. Burst phases are re-drawn per record when
    ``randomize_burst_phase`` is set, so consecutive captures are not aligned.
    """

    scene: SceneSpec
    bands: list[dict]
    site_id: str = "synthetic"
    gain_db: int = 0
    start_utc: datetime = field(default_factory=lambda: datetime(2023, 6, 1, tzinfo=timezone.utc))
    interval_s: int = 60
    records_per_band: int = 1
    randomize_burst_phase: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        data = dict(data)
        allowed = {
            "scene", "bands", "site_id", "gain_db", "start_utc", "interval_s",
            "records_per_band", "randomize_burst_phase",
        }
        unknown = set(data) - allowed
        if unknown:
            raise SpecError(f"unknown corpus keys {sorted(unknown)}")
        if "scene" not in data or "bands" not in data:
            raise SpecError("corpus spec needs 'scene' and 'bands'")
        data["scene"] = SceneSpec.from_dict(data["scene"])
        data["bands"] = [b if isinstance(b, dict) else {"center_freq_hz": b} for b in data["bands"]]
        if "start_utc" in data:
            data["start_utc"] = parse_timestamp(data["start_utc"])
        return cls(**data)

    def band_plan(self) -> BandPlan:
        return BandPlan(tuple(sorted(int(b["center_freq_hz"]) for b in self.bands)))

    def scenes(self):
        """Yield ``(record_index, band_entry, timestamp, SceneSpec)`` in capture order."""
        seeds = np.random.SeedSequence(self.scene.seed)
        index = 0
        for rep in range(self.records_per_band):
            for band in self.bands:
                ts = datetime.fromtimestamp(
                    self.start_utc.timestamp() + index * self.interval_s, tz=timezone.utc
                )
                child = seeds.spawn(1)[0]
                record_seed = int(child.generate_state(1, dtype=np.uint64)[0])
                rng = np.random.default_rng(child.spawn(1)[0])
                comps = band.get("components", [c.to_dict() for c in self.scene.components])
                comps = [c if isinstance(c, Component) else Component.from_dict(c) for c in comps]
                if self.randomize_burst_phase:
                    comps = [
                        Component(**{**c.to_dict(), "phase_s": float(rng.uniform(0, c.period_s))})
                        if c.kind == "burst" else c
                        for c in comps
                    ]
                base = self.scene.to_dict()
                base.update(
                    seed=record_seed,
                    components=comps,
                    noise_floor_dbm=band.get("noise_floor_dbm", self.scene.noise_floor_dbm),
                    sinr_db=band.get("sinr_db", self.scene.sinr_db),
                )
                yield index, band, ts, SceneSpec.from_dict(base)
                index += 1

    def records(self):
        for index, band, ts, spec in self.scenes():
            yield index, synth_scene(
                spec,
                site_id=self.site_id,
                center_freq_hz=int(band["center_freq_hz"]),
                gain_db=int(band.get("gain_db", self.gain_db)),
                timestamp_utc=ts,
            )
