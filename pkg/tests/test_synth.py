import csv

import numpy as np
import pytest

from byolab.audio_io import Waveform, read_wav
from byolab.features import erb_band_edges, erb_band_energies, rms_level, spectral_centroid, yin_pitch
from byolab.synth import (ClassSpec, SynthSpec, band_noise_spec, generate_clip, mixed_all_spec, mixed_noise_spec,
                          synth_dataset, tone_am_spec, tone_chirp_spec)

BIN = 16000 / 1024


def truth_rows(d):
    with open(d / "ground_truth.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def _wave(cls, spec, i):
    x, _ = generate_clip(cls, spec, np.random.default_rng([spec.seed, i]))
    return Waveform(x, spec.sample_rate)


def test_split_counts(tmp_path):
    m = synth_dataset(SynthSpec([ClassSpec("a", "tone", f0=(200, 300)), ClassSpec("b", "band_noise", band=(100, 900))],
                                clips_per_class=10, clip_seconds=0.2), tmp_path)
    assert len(m.entries) == 20
    assert m.counts == {"train": 14, "validation": 3, "test": 3}
    assert len(truth_rows(tmp_path)) == 20


def test_same_seed_same_bytes(tmp_path):
    spec = tone_am_spec(clips_per_class=3, seed=9, clip_seconds=0.3)
    synth_dataset(spec, tmp_path / "a")
    synth_dataset(spec, tmp_path / "b")
    for f in sorted((tmp_path / "a" / "audio").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "audio" / f.name).read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()


def test_fixed_tone_pitch(tmp_path):
    spec = SynthSpec([ClassSpec("a440", "tone", f0=(440, 440), harmonics=4),
                      ClassSpec("quiet", "band_noise", band=(100, 200))], clips_per_class=5)
    m = synth_dataset(spec, tmp_path)
    for e in m.entries:
        if e.label == "a440":
            assert yin_pitch(read_wav(m.resolve(e))) == pytest.approx(440, rel=0.01)


def test_truth_matches_measurements(tmp_path):
    spec = SynthSpec([ClassSpec("tone", "tone", f0=(110, 880), harmonics=6),
                      ClassSpec("pure", "tone", f0=(300, 2000))], clips_per_class=10, seed=2)
    m = synth_dataset(spec, tmp_path)
    for e, row in zip(m.entries, truth_rows(tmp_path)):
        w = read_wav(m.resolve(e))
        f0 = float(row["f0"])
        assert yin_pitch(w) == pytest.approx(f0, rel=0.01)
        assert rms_level(w) == pytest.approx(float(row["level_db"]), abs=0.01)
        if e.label == "pure":
            assert abs(spectral_centroid(w) - f0) <= BIN


def test_band_noise_centroid_sits_mid_band():
    spec = band_noise_spec(clips_per_class=10, seed=4)
    for cls in spec.classes:
        c = [spectral_centroid(_wave(cls, spec, i)) for i in range(10)]
        assert abs(np.mean(c) - np.mean(cls.band)) <= BIN


def test_band_noise_classes_separate_by_20db():
    spec = band_noise_spec(clips_per_class=10, seed=6)
    low, high = spec.classes
    edges = erb_band_edges(20, 50, 8000)
    only_low = (edges[1:] <= low.band[1]) & (edges[:-1] >= low.band[0])
    only_high = (edges[1:] <= high.band[1]) & (edges[:-1] >= high.band[0])
    assert only_low.any() and only_high.any()
    for i in range(10):
        lo = erb_band_energies(_wave(low, spec, i))
        hi = erb_band_energies(_wave(high, spec, i))
        assert np.all(lo[only_low] - hi[only_low] >= 20)
        assert np.all(hi[only_high] - lo[only_high] >= 20)


def test_presets_are_valid():
    for make in (band_noise_spec, tone_chirp_spec, tone_am_spec, mixed_noise_spec, mixed_all_spec):
        spec = make(clips_per_class=2)
        assert len(spec.classes) >= 2
        for cls in spec.classes:
            x, truth = generate_clip(cls, spec, np.random.default_rng(0))
            assert x.shape == (16000,) and np.max(np.abs(x)) <= 1.0 and truth["kind"] == cls.kind


def test_invalid_specs():
    with pytest.raises(ValueError):
        ClassSpec("x", "square", f0=(1, 2))
    with pytest.raises(ValueError):
        ClassSpec("x", "tone")
    with pytest.raises(ValueError):
        ClassSpec("x", "tone", f0=(500, 100))
    with pytest.raises(ValueError):
        SynthSpec([ClassSpec("x", "tone", f0=(100, 9000))])
    with pytest.raises(ValueError):
        SynthSpec([ClassSpec("x", "tone", f0=(100, 200)), ClassSpec("x", "tone", f0=(100, 200))])
