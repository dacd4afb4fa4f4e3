"""Interpretable acoustic descriptors used as reference dimensions for RSA."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .audio_io import Waveform
from .frontend import FrontendConfig, SignalLengthError, frame_signal, mel_power

DB_FLOOR = -120.0
# returned by yin_pitch / spectral_centroid when there is nothing to measure
UNVOICED = None
UNDEFINED = None


@dataclass
class FeatureConfig:
    n_bands: int = 20
    erb_fmin: float = 50.0
    erb_fmax: float = 8000.0
    centroid_n_fft: int = 1024
    centroid_hop: int = 512
    yin_frame: int = 1024
    yin_hop: int = 256
    yin_threshold: float = 0.1
    pitch_fmin: float = 65.0
    pitch_fmax: float = 2093.0
    min_voiced_fraction: float = 0.2
    include_pitch: bool = False
    variability_range_db: float = 80.0

    def to_dict(self) -> dict:
        return asdict(self)


def _db(power, floor_db: float = DB_FLOOR):
    power = np.asarray(power, dtype=np.float64)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(power)
    return np.maximum(db, floor_db)


def rms_level(w: Waveform) -> float:
    if len(w) == 0:
        raise ValueError("rms_level of an empty waveform")
    ms = float(np.mean(w.samples ** 2))
    return float(_db(ms))


def hz_to_erb_rate(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def erb_rate_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_band_edges(n_bands: int, fmin: float = 50.0, fmax: float = 8000.0) -> np.ndarray:
    """n_bands + 1 edges equally spaced on the ERB-rate scale."""
    if n_bands < 2:
        raise ValueError("n_bands must be >= 2")
    return erb_rate_to_hz(np.linspace(hz_to_erb_rate(fmin), hz_to_erb_rate(fmax), n_bands + 1))


def _band_index(freqs: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # -1 marks bins outside [edges[0], edges[-1]]; the top edge is inclusive
    idx = np.searchsorted(edges, freqs, side="right") - 1
    idx[freqs == edges[-1]] = len(edges) - 2
    idx[(freqs < edges[0]) | (freqs > edges[-1])] = -1
    return idx


def periodogram(x: np.ndarray, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Hann periodogram scaled so bins sum to the mean-square power."""
    n = len(x)
    win = np.hanning(n + 1)[:-1] if n > 1 else np.ones(1)
    spec = np.abs(np.fft.rfft(x * win)) ** 2 / (n * np.sum(win ** 2))
    spec[1:] *= 2.0
    if n % 2 == 0 and n > 1:
        spec[-1] /= 2.0
    return np.fft.rfftfreq(n, 1.0 / sample_rate), spec


def erb_band_energies(w: Waveform, n_bands: int = 20, fmin: float = 50.0,
                      fmax: float = 8000.0) -> np.ndarray:
    fmax = min(fmax, w.sample_rate / 2)
    edges = erb_band_edges(n_bands, fmin, fmax)
    freqs, spec = periodogram(w.samples, w.sample_rate)
    idx = _band_index(freqs, edges)
    keep = idx >= 0
    power = np.bincount(idx[keep], weights=spec[keep], minlength=n_bands)
    return _db(power)


def spectral_centroid(w: Waveform, n_fft: int = 1024, hop: int = 512) -> float | None:
    """Mean over non-silent frames of the power-weighted mean frequency.

    Frames use a rectangular window so a DC signal lands entirely in bin 0.
    Returns ``UNDEFINED`` (None) when every frame is silent.
    """
    x = w.samples
    if len(x) == 0:
        raise ValueError("spectral_centroid of an empty waveform")
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    frames = frame_signal(x, n_fft, hop, center=False)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    total = power.sum(axis=1)
    live = total > 0
    if not np.any(live):
        return UNDEFINED
    freqs = np.fft.rfftfreq(n_fft, 1.0 / w.sample_rate)
    per_frame = (power[live] @ freqs) / total[live]
    return float(np.mean(per_frame))


def _variability_frontend(frontend: FrontendConfig | None, sample_rate: int) -> FrontendConfig:
    frontend = frontend or FrontendConfig(sample_rate=sample_rate)
    # no reflect padding: edge frames would otherwise differ from interior ones
    return replace(frontend, center=False)


def _relative_log(power: np.ndarray, range_db: float) -> np.ndarray:
    # the floor tracks the clip's peak, so a global gain is an exact shift
    peak = power.max()
    if peak <= 0:
        return np.zeros_like(power)
    return np.log(np.maximum(power, peak * 10.0 ** (-range_db / 10.0)))


def spectral_variability(w: Waveform, frontend: FrontendConfig | None = None,
                         range_db: float = 80.0) -> float:
    """Std over frames of log mel power, averaged over mel bins.

    Power is floored ``range_db`` below the clip's peak mel power, so bins
    holding only leakage far below the signal do not contribute ripple.
    """
    cfg = _variability_frontend(frontend, w.sample_rate)
    if len(w) < cfg.n_fft or cfg.n_frames(len(w)) < 2:
        raise SignalLengthError("spectral_variability needs at least two frames")
    logp = _relative_log(mel_power(w, cfg), range_db)
    return float(np.mean(np.std(logp, axis=1)))


def spectral_variability_bands(w: Waveform, n_bands: int = 20, fmin: float = 50.0,
                               fmax: float = 8000.0, frontend: FrontendConfig | None = None,
                               range_db: float = 80.0) -> np.ndarray:
    """Per-ERB-band std over frames of log band power."""
    cfg = _variability_frontend(frontend, w.sample_rate)
    if len(w) < cfg.n_fft or cfg.n_frames(len(w)) < 2:
        raise SignalLengthError("spectral_variability needs at least two frames")
    window = np.hanning(cfg.n_fft + 1)[:-1]
    frames = frame_signal(w.samples, cfg.n_fft, cfg.hop_length, center=False)
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    edges = erb_band_edges(n_bands, fmin, min(fmax, w.sample_rate / 2))
    idx = _band_index(np.fft.rfftfreq(cfg.n_fft, 1.0 / w.sample_rate), edges)
    onehot = np.zeros((power.shape[1], n_bands))
    keep = idx >= 0
    onehot[np.nonzero(keep)[0], idx[keep]] = 1.0
    return np.std(_relative_log(power @ onehot, range_db), axis=0)


def _yin_frame(x: np.ndarray, width: int, tau_min: int, tau_max: int,
               threshold: float) -> float | None:
    """Best period (in samples) for one frame or None when unvoiced."""
    n = 1 << int(math.ceil(math.log2(len(x) + width)))
    fx = np.fft.rfft(x, n)
    fw = np.fft.rfft(x[:width], n)
    acf = np.fft.irfft(np.conj(fw) * fx, n)[: tau_max + 2]
    sq = np.concatenate([[0.0], np.cumsum(x ** 2)])
    taus = np.arange(tau_max + 2)
    energy_shift = sq[taus + width] - sq[taus]
    diff = sq[width] + energy_shift - 2.0 * acf
    diff[0] = 0.0
    diff = np.maximum(diff, 0.0)

    cum = np.cumsum(diff[1:])
    cmnd = np.ones_like(diff)
    with np.errstate(invalid="ignore", divide="ignore"):
        cmnd[1:] = np.where(cum > 0, diff[1:] * taus[1:] / cum, 1.0)

    below = np.nonzero(cmnd[tau_min: tau_max + 1] < threshold)[0]
    if below.size == 0:
        return None
    tau = tau_min + int(below[0])
    while tau + 1 <= tau_max and cmnd[tau + 1] < cmnd[tau]:
        tau += 1

    a, b, c = cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]
    denom = a - 2.0 * b + c
    shift = 0.5 * (a - c) / denom if denom > 0 else 0.0
    return tau + float(np.clip(shift, -0.5, 0.5))


def yin_frames(w: Waveform, fmin: float = 65.0, fmax: float = 2093.0, frame: int = 1024,
               hop: int = 256, threshold: float = 0.1) -> list[float | None]:
    """Per-frame YIN f0 estimates (None for unvoiced frames)."""
    sr = w.sample_rate
    if not 0 < fmin < fmax:
        raise ValueError("need 0 < fmin < fmax")
    tau_max = int(math.ceil(sr / fmin))
    tau_min = max(2, int(math.floor(sr / fmax)))
    if len(w) < 2 * sr / fmin:
        raise SignalLengthError(f"yin needs at least {2 * sr / fmin:.0f} samples")
    x = w.samples
    if len(x) < frame:
        frame = len(x)
    width = min(frame // 2, frame - tau_max - 2)
    if width < tau_max // 2:
        width = frame - tau_max - 2
    starts = range(0, len(x) - frame + 1, hop)
    out = []
    for s in starts:
        tau = _yin_frame(x[s:s + frame], width, tau_min, tau_max, threshold)
        out.append(None if tau is None else float(np.clip(sr / tau, fmin, fmax)))
    return out


def yin_pitch(w: Waveform, fmin: float = 65.0, fmax: float = 2093.0, frame: int = 1024,
              hop: int = 256, threshold: float = 0.1,
              min_voiced_fraction: float = 0.2) -> float | None:
    """Median f0 over voiced frames, or ``UNVOICED`` (None)."""
    est = yin_frames(w, fmin, fmax, frame, hop, threshold)
    voiced = [f for f in est if f is not None]
    if not est or len(voiced) < min_voiced_fraction * len(est):
        return UNVOICED
    return float(np.median(voiced))


def feature_names(cfg: FeatureConfig) -> list[str]:
    names = ["rms_db"]
    names += [f"erb_energy_{k + 1:02d}" for k in range(cfg.n_bands)]
    names += ["spectral_centroid", "spectral_variability"]
    names += [f"spectral_variability_erb_{k + 1:02d}" for k in range(cfg.n_bands)]
    if cfg.include_pitch:
        names.append("pitch")
    return names


def extract_features(w: Waveform, cfg: FeatureConfig | None = None,
                     frontend: FrontendConfig | None = None) -> dict[str, float | None]:
    cfg = cfg or FeatureConfig()
    out: dict[str, float | None] = {"rms_db": rms_level(w)}
    for k, v in enumerate(erb_band_energies(w, cfg.n_bands, cfg.erb_fmin, cfg.erb_fmax)):
        out[f"erb_energy_{k + 1:02d}"] = float(v)
    out["spectral_centroid"] = spectral_centroid(w, cfg.centroid_n_fft, cfg.centroid_hop)
    out["spectral_variability"] = spectral_variability(w, frontend, cfg.variability_range_db)
    bands = spectral_variability_bands(w, cfg.n_bands, cfg.erb_fmin, cfg.erb_fmax, frontend,
                                       cfg.variability_range_db)
    for k, v in enumerate(bands):
        out[f"spectral_variability_erb_{k + 1:02d}"] = float(v)
    if cfg.include_pitch:
        out["pitch"] = yin_pitch(w, cfg.pitch_fmin, cfg.pitch_fmax, cfg.yin_frame, cfg.yin_hop,
                                 cfg.yin_threshold, cfg.min_voiced_fraction)
    return out


def write_features_csv(path, paths: list[str], rows: list[dict], names: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["path"] + names)
        for p, row in zip(paths, rows):
            cells = []
            for n in names:
                v = row.get(n)
                cells.append("" if v is None else repr(float(v)))
            wr.writerow([p] + cells)


def read_features_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Returns (paths, feature names, matrix) with NaN for empty cells."""
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        paths, rows = [], []
        for rec in rd:
            paths.append(rec[0])
            rows.append([float(c) if c != "" else np.nan for c in rec[1:]])
    return paths, header[1:], np.asarray(rows, dtype=np.float64).reshape(len(paths), len(header) - 1)
