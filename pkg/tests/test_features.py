import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from byolab.audio_io import Waveform
from byolab.features import (FeatureConfig, erb_band_edges, erb_band_energies, extract_features, feature_names,
                             hz_to_erb_rate, read_features_csv, rms_level, spectral_centroid,
                             spectral_variability, spectral_variability_bands, write_features_csv, yin_frames,
                             yin_pitch)
from byolab.frontend import SignalLengthError

from conftest import SR, sawtooth, sine


def band_sums_oracle(x, sr, edges):
    # independent route: explicit loop over FFT bins with the same window and scaling
    n = len(x)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    mag = np.abs(np.fft.rfft(x * win)) ** 2 / (n * np.sum(win ** 2))
    out = np.zeros(len(edges) - 1)
    for k, f in enumerate(np.arange(len(mag)) * sr / n):
        for b in range(len(edges) - 1):
            top_ok = f < edges[b + 1] or (b == len(edges) - 2 and f == edges[b + 1])
            if edges[b] <= f and top_ok:
                weight = 1.0 if k == 0 or (n % 2 == 0 and k == n // 2) else 2.0
                out[b] += weight * mag[k]
                break
    return 10 * np.log10(np.maximum(out, 1e-12))


def test_rms_examples():
    square = Waveform(np.where(np.arange(1000) % 20 < 10, 1.0, -1.0), SR)
    assert rms_level(square) == pytest.approx(0.0, abs=1e-12)
    assert rms_level(sine(1000.0)) == pytest.approx(-3.0103, abs=1e-3)
    assert rms_level(Waveform(np.zeros(100), SR)) == -120.0


@given(st.floats(1e-3, 1.0))
def test_rms_scaling(alpha):
    w = sine(300.0, 0.1, amp=0.5)
    scaled = Waveform(w.samples * alpha, SR)
    assert abs(rms_level(scaled) - rms_level(w) - 20 * np.log10(alpha)) < 1e-9


def test_erb_edges():
    e = erb_band_edges(20, 50, 8000)
    assert e[0] == pytest.approx(50) and e[-1] == pytest.approx(8000)
    assert np.allclose(np.diff(hz_to_erb_rate(e)), np.diff(hz_to_erb_rate(e))[0])
    with pytest.raises(ValueError):
        erb_band_edges(1)


@pytest.mark.parametrize("band", [2, 7, 12, 17])
def test_tone_dominates_its_band(band):
    edges = erb_band_edges(20, 50, 8000)
    f = float(np.sqrt(edges[band] * edges[band + 1]))
    w = sine(f, 1.0, amp=0.5)
    got = erb_band_energies(w)
    assert np.allclose(got, band_sums_oracle(w.samples, SR, edges), atol=1e-9)
    others = np.delete(got, band)
    assert got[band] - others.max() >= 20.0


def test_white_noise_band_order_follows_bandwidth():
    rng = np.random.default_rng(5)
    mean = np.mean([erb_band_energies(Waveform(rng.uniform(-0.5, 0.5, SR), SR)) for _ in range(100)], axis=0)
    widths = np.diff(erb_band_edges(20, 50, 8000))
    assert np.array_equal(np.argsort(mean), np.argsort(widths))


def test_silence_bands_at_floor():
    assert np.all(erb_band_energies(Waveform(np.zeros(4096), SR)) == -120.0)


def test_centroid_examples():
    assert abs(spectral_centroid(sine(1000.0, 0.5)) - 1000.0) <= SR / 1024
    assert spectral_centroid(Waveform(np.full(4096, 0.5), SR)) == 0.0
    assert spectral_centroid(Waveform(np.zeros(4096), SR)) is None


def test_centroid_white_noise_half_nyquist():
    rng = np.random.default_rng(9)
    vals = [spectral_centroid(Waveform(rng.uniform(-0.5, 0.5, 8192), SR)) for _ in range(100)]
    assert abs(np.mean(vals) - 4000.0) / 4000.0 < 0.05


@given(st.integers(0, 10_000))
def test_centroid_in_range(seed):
    x = np.random.default_rng(seed).uniform(-1, 1, 2048) * np.random.default_rng(seed + 1).uniform()
    c = spectral_centroid(Waveform(x, SR))
    assert c is None or 0.0 <= c <= SR / 2


@pytest.mark.parametrize("freq", [110.0, 440.0, 523.25, 1234.0])
def test_stationary_tone_has_low_variability(freq):
    assert spectral_variability(sine(freq, 1.0, amp=0.5, phase=0.3)) < 0.05


def test_bursts_vary_more_than_tone():
    t = np.arange(SR) / SR
    bursts = Waveform(0.5 * np.sin(2 * np.pi * 440 * t) * ((t * 10).astype(int) % 2 == 0), SR)
    assert spectral_variability(bursts) >= 10 * spectral_variability(sine(440.0, 1.0, amp=0.5))


@given(st.integers(0, 1000), st.floats(1e-3, 1.0))
def test_variability_gain_invariant(seed, gain):
    x = np.random.default_rng(seed).uniform(-1, 1, 4000) * np.linspace(0, 1, 4000)
    a = spectral_variability(Waveform(x, SR))
    b = spectral_variability(Waveform(x * gain, SR))
    assert abs(a - b) < 1e-9
    ba = spectral_variability_bands(Waveform(x, SR))
    bb = spectral_variability_bands(Waveform(x * gain, SR))
    assert np.max(np.abs(ba - bb)) < 1e-9


def test_variability_needs_two_frames():
    with pytest.raises(SignalLengthError):
        spectral_variability(Waveform(np.zeros(1100), SR))


def test_yin_sine_and_sawtooth():
    assert yin_pitch(sine(440.0, 0.5, amp=0.5)) == pytest.approx(440.0, rel=0.01)
    assert yin_pitch(sawtooth(220.0, 0.5)) == pytest.approx(220.0, rel=0.01)


def test_yin_white_noise_unvoiced():
    rng = np.random.default_rng(3)
    rates = []
    for _ in range(100):
        est = yin_frames(Waveform(rng.uniform(-0.5, 0.5, 8000), SR))
        rates.append(np.mean([f is not None for f in est]))
    assert np.mean(rates) < 0.2
    assert yin_pitch(Waveform(rng.uniform(-0.5, 0.5, 8000), SR)) is None


@given(st.floats(110.0, 880.0), st.floats(0.05, 1.0))
def test_yin_gain_and_polarity_invariant(freq, gain):
    w = sawtooth(freq, 0.3)
    ref = yin_pitch(w)
    assert yin_pitch(Waveform(w.samples * gain, SR)) == pytest.approx(ref, rel=1e-9)
    assert yin_pitch(Waveform(-w.samples, SR)) == pytest.approx(ref, rel=1e-9)
    assert 65.0 <= ref <= 2093.0


def test_yin_length_precondition():
    with pytest.raises(SignalLengthError):
        yin_pitch(Waveform(np.zeros(100), SR))


def test_feature_names_and_csv_round_trip(tmp_path):
    cfg = FeatureConfig(include_pitch=True)
    names = feature_names(cfg)
    assert names[0] == "rms_db" and names[-1] == "pitch" and len(names) == 1 + 20 + 2 + 20 + 1
    rows = [extract_features(sine(330.0, 0.5, amp=0.3), cfg),
            extract_features(Waveform(np.random.default_rng(0).uniform(-0.3, 0.3, 8000), SR), cfg)]
    assert rows[0]["pitch"] == pytest.approx(330.0, rel=0.01)
    assert rows[1]["pitch"] is None
    write_features_csv(tmp_path / "f.csv", ["a.wav", "b.wav"], rows, names)
    assert tmp_path.joinpath("f.csv").read_text().splitlines()[2].endswith(",")
    paths, back_names, mat = read_features_csv(tmp_path / "f.csv")
    assert paths == ["a.wav", "b.wav"] and back_names == names
    assert np.isnan(mat[1, -1])
    assert mat[0, 0] == rows[0]["rms_db"]
