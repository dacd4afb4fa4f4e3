"""Labelled synthetic corpora with known acoustic ground truth."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import Manifest, ManifestEntry, Waveform, save_manifest, write_wav

KINDS = ("tone", "band_noise", "am_noise", "chirp")


@dataclass
class ClassSpec:
    name: str
    kind: str
    f0: tuple[float, float] | None = None          # tone / chirp start (Hz)
    f1: tuple[float, float] | None = None          # chirp end (Hz)
    band: tuple[float, float] | None = None        # noise band edges (Hz)
    mod_rate: tuple[float, float] | None = None    # AM rate (Hz)
    harmonics: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}; expected one of {KINDS}")
        for name in ("f0", "f1", "band", "mod_rate"):
            v = getattr(self, name)
            if v is not None:
                v = tuple(float(x) for x in v)
                if len(v) != 2 or v[0] > v[1] or v[0] < 0:
                    raise ValueError(f"{self.name}: invalid range {name}={v}")
                setattr(self, name, v)
        need = {"tone": ("f0",), "band_noise": ("band",), "am_noise": ("mod_rate",),
                "chirp": ("f0", "f1")}[self.kind]
        for name in need:
            if getattr(self, name) is None:
                raise ValueError(f"{self.name}: {self.kind} needs {name}")
        if self.harmonics < 1:
            raise ValueError("harmonics must be >= 1")


@dataclass
class SynthSpec:
    classes: list[ClassSpec]
    clips_per_class: int = 100
    clip_seconds: float = 1.0
    sample_rate: int = 16000
    seed: int = 0
    level_db: float = -20.0
    jitter_db: float = 6.0
    name: str = "synthetic"
    splits: tuple[float, float] = (0.70, 0.85)

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]
        if len(self.classes) < 1 or self.clips_per_class < 1:
            raise ValueError("need at least one class and one clip per class")
        if len({c.name for c in self.classes}) != len(self.classes):
            raise ValueError("class names must be unique")
        nyq = self.sample_rate / 2
        for c in self.classes:
            for r in (c.f0, c.f1, c.band):
                if r is not None and r[1] > nyq:
                    raise ValueError(f"{c.name}: frequency range exceeds Nyquist ({nyq} Hz)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        return cls(**json.loads(Path(path).read_text()))


def _harmonic_phase_sum(phase: np.ndarray, inst_freq_max: float, harmonics: int, nyquist: float):
    # band-limited: drop partials whose highest instantaneous frequency reaches Nyquist
    out = np.zeros_like(phase)
    for k in range(1, harmonics + 1):
        if k * inst_freq_max >= nyquist:
            break
        out += np.sin(k * phase) / k
    return out


def band_noise(n: int, sr: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n)


def generate_clip(cls: ClassSpec, spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Returns (samples, ground-truth dict) for one clip."""
    sr = spec.sample_rate
    n = int(round(spec.clip_seconds * sr))
    t = np.arange(n) / sr
    nyq = sr / 2
    truth: dict = {"kind": cls.kind}
    if cls.kind == "tone":
        f0 = float(rng.uniform(*cls.f0))
        ph = 2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi)
        x = _harmonic_phase_sum(ph, f0, cls.harmonics, nyq)
        truth["f0"] = f0
    elif cls.kind == "chirp":
        f0 = float(rng.uniform(*cls.f0))
        f1 = float(rng.uniform(*cls.f1))
        dur = n / sr
        if abs(f1 - f0) < 1e-9:
            ph = 2 * np.pi * f0 * t
        else:
            k = np.log(f1 / f0) / dur
            ph = 2 * np.pi * f0 * np.expm1(k * t) / k
        ph = ph + rng.uniform(0, 2 * np.pi)
        x = _harmonic_phase_sum(ph, max(f0, f1), cls.harmonics, nyq)
        truth.update(f0=f0, f1=f1)
    elif cls.kind == "band_noise":
        x = band_noise(n, sr, *cls.band, rng)
        truth.update(band_lo=cls.band[0], band_hi=cls.band[1])
    else:
        rate = float(rng.uniform(*cls.mod_rate))
        lo, hi = cls.band if cls.band is not None else (0.0, nyq)
        carrier = band_noise(n, sr, lo, hi, rng)
        x = carrier * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))) / 2
        truth.update(mod_rate=rate, band_lo=lo, band_hi=hi)
    level = spec.level_db + float(rng.uniform(-spec.jitter_db, spec.jitter_db))
    rms = np.sqrt(np.mean(x ** 2))
    if rms > 0:
        x = x * (10 ** (level / 20) / rms)
    truth["level_db"] = level
    return np.clip(x, -1.0, 1.0), truth


TRUTH_COLUMNS = ["path", "label", "kind", "f0", "f1", "band_lo", "band_hi", "mod_rate", "level_db"]


def split_for_index(i: int, n: int, splits=(0.70, 0.85)) -> str:
    if i < round(splits[0] * n):
        return "train"
    if i < round(splits[1] * n):
        return "validation"
    return "test"


def synth_dataset(spec: SynthSpec, out_dir) -> Manifest:
    """Write WAVs, ``manifest.jsonl`` and ``ground_truth.csv`` under out_dir.

    Entries are interleaved by class (clip 0 of every class, then clip 1, ...)
    and split 70/15/15 by that global index, which keeps partitions balanced.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    total = spec.clips_per_class * len(spec.classes)
    entries, truths = [], []
    for clip in range(spec.clips_per_class):
        for ci, cls in enumerate(spec.classes):
            rng = np.random.default_rng([spec.seed, ci, clip])
            x, truth = generate_clip(cls, spec, rng)
            rel = f"audio/{cls.name}_{clip:04d}.wav"
            write_wav(out_dir / rel, Waveform(x, spec.sample_rate))
            part = split_for_index(len(entries), total, spec.splits)
            entries.append(ManifestEntry(rel, cls.name, part))
            truths.append({"path": rel, "label": cls.name, **truth})
    manifest = Manifest(entries, spec.name, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    with open(out_dir / "ground_truth.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, TRUTH_COLUMNS, lineterminator="\n")
        wr.writeheader()
        for row in truths:
            wr.writerow({k: ("" if row.get(k) is None else row[k]) for k in TRUTH_COLUMNS})
    return manifest


# presets used by the scripts and acceptance tests

def band_noise_spec(clips_per_class=100, seed=0, **kw) -> SynthSpec:
    """Low-band vs high-band noise."""
    return SynthSpec([ClassSpec("low_noise", "band_noise", band=(100.0, 1000.0)),
                      ClassSpec("high_noise", "band_noise", band=(3000.0, 7000.0))],
                     clips_per_class=clips_per_class, seed=seed, name="bandnoise", **kw)


def tone_chirp_spec(clips_per_class=100, seed=0, **kw) -> SynthSpec:
    """Steady harmonic tones vs harmonic up-chirps over the same range."""
    return SynthSpec([ClassSpec("tone", "tone", f0=(150.0, 1200.0), harmonics=4),
                      ClassSpec("chirp", "chirp", f0=(150.0, 400.0), f1=(600.0, 1200.0), harmonics=4)],
                     clips_per_class=clips_per_class, seed=seed, name="tonechirp", **kw)


def tone_am_spec(clips_per_class=100, seed=0, **kw) -> SynthSpec:
    """Harmonic tones vs amplitude-modulated broadband noise."""
    return SynthSpec([ClassSpec("tone", "tone", f0=(110.0, 880.0), harmonics=8),
                      ClassSpec("am_noise", "am_noise", mod_rate=(2.0, 16.0))],
                     clips_per_class=clips_per_class, seed=seed, name="toneam", **kw)


def mixed_noise_spec(clips_per_class=67, seed=3, **kw) -> SynthSpec:
    """Both band-noise classes plus amplitude-modulated broadband noise."""
    return SynthSpec([ClassSpec("low_noise", "band_noise", band=(100.0, 1000.0)),
                      ClassSpec("high_noise", "band_noise", band=(3000.0, 7000.0)),
                      ClassSpec("am_noise", "am_noise", mod_rate=(2.0, 16.0))],
                     clips_per_class=clips_per_class, seed=seed, name="mixednoise", **kw)


def mixed_all_spec(clips_per_class=40, seed=3, **kw) -> SynthSpec:
    """One class per generator kind, noise bands included."""
    return SynthSpec([ClassSpec("low_noise", "band_noise", band=(100.0, 1000.0)),
                      ClassSpec("high_noise", "band_noise", band=(3000.0, 7000.0)),
                      ClassSpec("tone", "tone", f0=(110.0, 880.0), harmonics=6),
                      ClassSpec("chirp", "chirp", f0=(150.0, 400.0), f1=(600.0, 1200.0), harmonics=4),
                      ClassSpec("am_noise", "am_noise", mod_rate=(2.0, 16.0))],
                     clips_per_class=clips_per_class, seed=seed, name="mixedall", **kw)
