import math
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsm.errors import InputTooShortError, TruncationError
from lsm.iq import Component, IqRecord, SceneSpec, synth_scene
from lsm.spectrogram import (
    EPS,
    PipelineConfig,
    Spectrogram,
    group_bounds,
    maxpool_time,
    preprocess_record,
    read_spectrogram,
    split_sequences,
    spectrogram_of,
    stft_psd,
    trimmed_mean_downsample,
    write_spectrogram,
)

TS = datetime(2023, 6, 15, 14, 30, 5, tzinfo=timezone.utc)


def _record(samples, rate=256):
    return IqRecord("s", 630_000_000, rate, 0, TS, np.asarray(samples))


def direct_dft_psd(frame, offset=0.0):
    """O(n^2) DFT, then fft-shift by index arithmetic."""
    n = len(frame)
    frame = np.asarray(frame, dtype=np.complex128)
    out = np.empty(n)
    for u in range(n):
        k = (u - n // 2) % n
        acc = sum(frame[m] * complex(math.cos(-2 * math.pi * k * m / n), math.sin(-2 * math.pi * k * m / n))
                  for m in range(n))
        out[u] = 10 * math.log10(abs(acc) ** 2 / n + EPS) + offset
    return out


def brute_trimmed_mean(values, trim):
    v = sorted(values)
    cut = int(math.floor(trim * len(v)))
    kept = v[cut : len(v) - cut]
    return sum(kept) / len(kept)


def _spec(values, dt=1.0):
    return Spectrogram(np.asarray(values, dtype=np.float64), 1.0, dt, {})


def test_stft_matches_direct_dft(rng):
    samples = (rng.standard_normal(512) + 1j * rng.standard_normal(512)).astype(np.complex64)
    psd = stft_psd(_record(samples), 64, calibration_offset_db=3.0).values
    for f in range(psd.shape[1]):
        ref = direct_dft_psd(samples[f * 64 : (f + 1) * 64].astype(np.complex128), 3.0)
        np.testing.assert_allclose(psd[:, f], ref, atol=1e-6)


def test_complex_exponential_concentrates_in_one_row():
    k = 37
    x = np.exp(2j * np.pi * k * np.arange(256) / 256)
    psd = stft_psd(_record(x))
    row = 128 + k
    assert psd.values[row, 0] == pytest.approx(10 * math.log10(256), abs=1e-4)
    others = np.delete(psd.values[:, 0], row)
    # complex64 storage leaves rounding leakage far below the tone
    assert np.all(others < psd.values[row, 0] - 150)


def test_zero_input_is_numeric_floor():
    psd = stft_psd(_record(np.zeros(1024)), calibration_offset_db=-2.5).values
    assert np.all(psd == 10 * np.log10(EPS) - 2.5)


def test_resolution_bookkeeping():
    spec = stft_psd(_record(np.ones(2560), rate=2560))
    assert spec.bin_bandwidth_hz * 256 == 2560
    assert spec.slice_duration_s * spec.n_slices == pytest.approx(1.0)
    assert np.all(np.isfinite(spec.values))


def test_trailing_samples_dropped_and_short_input_rejected():
    assert stft_psd(_record(np.ones(600))).shape == (256, 2)
    with pytest.raises(InputTooShortError):
        stft_psd(_record(np.ones(100)))


def test_maxpool_examples():
    spec = maxpool_time(_spec([np.arange(1, 51)]), 25, 25)
    np.testing.assert_array_equal(spec.values, [[25, 50]])
    const = maxpool_time(_spec(np.full((3, 100), -7.0)), 25, 25)
    assert const.shape == (3, 4) and np.all(const.values == -7.0)
    assert const.slice_duration_s == 25.0


def test_maxpool_overlapping_stride(rng):
    row = rng.standard_normal(40)
    out = maxpool_time(_spec([row]), 5, 3).values[0]
    ref = [row[i : i + 5].max() for i in range(0, 36, 3)]
    np.testing.assert_array_equal(out, ref)


def test_maxpool_too_short():
    with pytest.raises(InputTooShortError):
        maxpool_time(_spec(np.zeros((2, 10))), 25, 25)


def test_group_sizes_for_3125_to_256():
    sizes = np.diff(group_bounds(3125, 256))
    assert set(sizes.tolist()) == {12, 13}
    assert sizes.sum() == 3125


def test_trimmed_mean_hand_example():
    spec = trimmed_mean_downsample(_spec([np.arange(12.0)]), 1, 0.1)
    assert spec.values[0, 0] == 5.5


def test_trimmed_mean_constant_row():
    out = trimmed_mean_downsample(_spec(np.full((2, 3125), -91.0)), 256, 0.1)
    assert out.shape == (2, 256) and np.all(out.values == -91.0)


@settings(max_examples=60, deadline=None)
@given(n_t=st.integers(1, 120), data=st.data(), trim=st.sampled_from([0.0, 0.1, 0.2, 0.45]))
def test_trimmed_mean_matches_brute_force(n_t, data, trim):
    out_len = data.draw(st.integers(1, n_t))
    row = np.array(data.draw(st.lists(st.floats(-150, 0), min_size=n_t, max_size=n_t)))
    out = trimmed_mean_downsample(_spec([row]), out_len, trim).values[0]
    for j in range(out_len):
        lo, hi = (j * n_t) // out_len, ((j + 1) * n_t) // out_len
        assert out[j] == pytest.approx(brute_trimmed_mean(row[lo:hi], trim), abs=1e-9)


def test_trimmed_mean_rejects_bad_args():
    with pytest.raises(ValueError):
        trimmed_mean_downsample(_spec(np.zeros((1, 10))), 11)
    with pytest.raises(ValueError):
        trimmed_mean_downsample(_spec(np.zeros((1, 10))), 5, 0.5)


def test_split_sequences_examples(rng):
    spec = Spectrogram(rng.standard_normal((256, 256)), 1.0, 1.0,
                       {"timestamp_utc": "2023-06-15T14:30:05Z", "gain_db": 3, "center_freq_hz": 630_000_000})
    pairs = split_sequences(spec, 128)
    assert len(pairs) == 256
    assert all(p.input.size == 128 and p.target.size == 128 for p in pairs)
    np.testing.assert_array_equal(pairs[7].values, spec.values[7])
    assert pairs[7].bin_index == 7 and pairs[7].timestamp_utc == TS and pairs[7].gain_db == 3
    edge = split_sequences(spec, 255)
    assert edge[0].input.size == 255 and edge[0].target.size == 1
    with pytest.raises(ValueError):
        split_sequences(spec, 256)


def test_small_pipeline_is_deterministic_and_finds_tone():
    fs = 256 * 25 * 256  # 1 s -> 6,400 frames -> 256 pooled slices, one per group
    spec = SceneSpec(seed=2, duration_s=1.0, sample_rate_hz=fs, noise_floor_dbm=-100.0,
                     components=(Component("tone", 10 * fs / 256, 10 * fs / 256, -70.0),))
    rec = synth_scene(spec)
    a = preprocess_record(rec)
    b = preprocess_record(rec)
    assert len(a) == 256
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    reduced = spectrogram_of(rec).values
    tone_row = 128 + 10
    assert np.all(reduced[tone_row] > reduced[np.arange(256) != tone_row].max(axis=0))


def test_spectrogram_dump_round_trip(tmp_path, rng):
    spec = Spectrogram(rng.standard_normal((4, 5)).astype(np.float32).astype(np.float64), 2.0, 0.5, {"a": 1})
    path = tmp_path / "x.spec"
    write_spectrogram(spec, path)
    back = read_spectrogram(path)
    np.testing.assert_array_equal(back.values, spec.values)
    assert back.provenance == {"a": 1} and back.slice_duration_s == 0.5
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(TruncationError):
        read_spectrogram(path)


def test_pipeline_config_defaults():
    cfg = PipelineConfig()
    assert (cfg.n_bins, cfg.pool_window, cfg.pool_stride, cfg.out_len, cfg.trim_fraction, cfg.n_in) == (
        256, 25, 25, 256, 0.1, 128)
