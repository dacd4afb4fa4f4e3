"""Log-mel front-end and dataset-level normalization statistics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .audio_io import Waveform

STD_FLOOR = 1e-8


class SignalLengthError(ValueError):
    pass


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop_length: int = 160
    n_mels: int = 64
    f_min: float = 60.0
    f_max: float = 7800.0
    log_floor: float = 1e-10
    center: bool = True
    per_bin_stats: bool = False

    def __post_init__(self):
        if self.n_fft < 2 or self.hop_length < 1 or self.n_mels < 1:
            raise ValueError("invalid frontend geometry")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("mel range must satisfy 0 <= f_min < f_max <= Nyquist")

    @property
    def frame_hop_seconds(self) -> float:
        return self.hop_length / self.sample_rate

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.n_fft:
            raise SignalLengthError(f"need at least {self.n_fft} samples, got {n_samples}")
        if self.center:
            return 1 + n_samples // self.hop_length
        return 1 + (n_samples - self.n_fft) // self.hop_length

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Spectrogram:
    values: np.ndarray          # [n_mels, n_frames]
    frame_hop: float
    freq_range: tuple[float, float]

    @property
    def mel_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    mean: float | np.ndarray
    std: float | np.ndarray
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        self.std = np.maximum(self.std, STD_FLOOR)
        if np.ndim(self.std) == 0:
            self.mean, self.std = float(self.mean), float(self.std)

    def to_dict(self) -> dict:
        conv = (lambda v: v) if np.ndim(self.std) == 0 else (lambda v: np.asarray(v).tolist())
        return {"mean": conv(self.mean), "std": conv(self.std), "sample_count": self.sample_count}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        mean, std = d["mean"], d["std"]
        if isinstance(mean, list):
            mean, std = np.asarray(mean), np.asarray(std)
        return cls(mean, std, int(d["sample_count"]))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular filters with unit peak, shape [n_mels, n_fft // 2 + 1]."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def frame_signal(x: np.ndarray, n_fft: int, hop: int, center: bool) -> np.ndarray:
    if center:
        x = np.pad(x, n_fft // 2, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    return frames


def power_spectrogram(x: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """|STFT|^2 with a periodic Hann window, shape [n_frames, n_fft // 2 + 1]."""
    window = np.hanning(cfg.n_fft + 1)[:-1]
    frames = frame_signal(np.asarray(x, dtype=np.float64), cfg.n_fft, cfg.hop_length, cfg.center)
    return np.abs(np.fft.rfft(frames * window, axis=1)) ** 2


def mel_power(w: Waveform, cfg: FrontendConfig) -> np.ndarray:
    """Mel-band power, shape [n_mels, n_frames]."""
    if len(w) < cfg.n_fft:
        raise SignalLengthError(f"need at least {cfg.n_fft} samples, got {len(w)}")
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"waveform rate {w.sample_rate} != frontend rate {cfg.sample_rate}")
    return mel_filterbank(cfg) @ power_spectrogram(w.samples, cfg).T


def logmel(w: Waveform, cfg: FrontendConfig | None = None) -> Spectrogram:
    cfg = cfg or FrontendConfig()
    values = np.log(mel_power(w, cfg) + cfg.log_floor)
    return Spectrogram(values, cfg.frame_hop_seconds, (cfg.f_min, cfg.f_max))


def _values(s) -> np.ndarray:
    return s.values if isinstance(s, Spectrogram) else np.asarray(s)


def fit_norm_stats(specs, per_bin: bool = False) -> NormStats:
    """Pooled mean/std over every time-frequency element of a spectrogram sample.

    With ``per_bin`` the statistics are per mel bin (pooled over frames).
    """
    specs = list(specs)
    if not specs:
        raise ValueError("fit_norm_stats needs at least one spectrogram")
    pooled = np.concatenate([_values(s).astype(np.float64) for s in specs], axis=1)
    if per_bin:
        mean = pooled.mean(axis=1)
        std = np.sqrt(((pooled - mean[:, None]) ** 2).mean(axis=1))
        return NormStats(mean, std, len(specs))
    mean = pooled.mean()
    std = np.sqrt(((pooled - mean) ** 2).mean())
    return NormStats(mean, std, len(specs))


def _broadcast(v, ref: np.ndarray):
    # per-bin stats index the mel axis, which is always second to last
    if np.ndim(v) == 0:
        return v
    return np.asarray(v).reshape(-1, 1)


def normalize(s, stats: NormStats):
    """Elementwise (x - mean) / std; returns the same kind it was given."""
    x = _values(s)
    out = (x - _broadcast(stats.mean, x)) / _broadcast(stats.std, x)
    if isinstance(s, Spectrogram):
        return Spectrogram(out, s.frame_hop, s.freq_range)
    return out


def denormalize(s, stats: NormStats):
    x = _values(s)
    out = x * _broadcast(stats.std, x) + _broadcast(stats.mean, x)
    if isinstance(s, Spectrogram):
        return Spectrogram(out, s.frame_hop, s.freq_range)
    return out
