"""Spectrogram-domain augmentations producing two views per example.

All functions take a normalized log-mel matrix ``[n_mels, n_frames]`` and a
``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

DB_PER_NEPER = 20.0 * math.log10(math.e)


@dataclass
class AugmentConfig:
    mixup_max_ratio: float = 0.4
    memory_size: int = 2048
    crop_freq_scale: tuple[float, float] = (0.6, 1.5)
    crop_time_scale: tuple[float, float] = (0.6, 1.5)
    fader_db_range: tuple[float, float] = (-10.0, 10.0)
    seed: int = 0

    def __post_init__(self):
        self.crop_freq_scale = tuple(float(v) for v in self.crop_freq_scale)
        self.crop_time_scale = tuple(float(v) for v in self.crop_time_scale)
        self.fader_db_range = tuple(float(v) for v in self.fader_db_range)
        if not 0.0 <= self.mixup_max_ratio <= 1.0:
            raise ValueError("mixup_max_ratio must lie in [0, 1]")
        if self.memory_size < 1:
            raise ValueError("memory_size must be >= 1")
        for name in ("crop_freq_scale", "crop_time_scale", "fader_db_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: min > max")
        if min(self.crop_freq_scale + self.crop_time_scale) <= 0:
            raise ValueError("crop scales must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(mixup_max_ratio=0.0, crop_freq_scale=(1.0, 1.0),
                   crop_time_scale=(1.0, 1.0), fader_db_range=(0.0, 0.0))


class MixupMemory:
    """FIFO ring buffer of past spectrograms."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def push(self, x: np.ndarray) -> None:
        self._items.append(np.array(x, copy=True))

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self._items[int(rng.integers(len(self._items)))]


def mixup_log(x: np.ndarray, mem: MixupMemory, lam: float, rng: np.random.Generator) -> np.ndarray:
    """log((1 - lam) exp(x) + lam exp(m)) with m drawn from memory; then push x."""
    if len(mem) == 0:
        mem.push(x)
        return np.array(x, copy=True)
    m = mem.draw(rng)
    with np.errstate(divide="ignore"):
        out = np.logaddexp(np.log1p(-lam) + x, np.log(lam) + m)
    mem.push(x)
    return out.astype(x.dtype, copy=False)


def bilinear_sample(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``x`` on the grid rows x cols; coordinates are clamped (edge replication)."""
    h, w = x.shape
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.minimum(np.floor(r).astype(int), h - 2) if h > 1 else np.zeros(len(r), int)
    c0 = np.minimum(np.floor(c).astype(int), w - 2) if w > 1 else np.zeros(len(c), int)
    fr = (r - r0)[:, None]
    fc = (c - c0)[None, :]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = x[np.ix_(r0, c0)] * (1 - fc) + x[np.ix_(r0, c1)] * fc
    bot = x[np.ix_(r1, c0)] * (1 - fc) + x[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def crop_resize(x: np.ndarray, top: float, left: float, height: float, width: float) -> np.ndarray:
    """Resample the rectangle (top, left, height, width), in input-cell units, to x's shape."""
    h, w = x.shape
    rows = top + (np.arange(h) + 0.5) * (height / h) - 0.5
    cols = left + (np.arange(w) + 0.5) * (width / w) - 0.5
    return bilinear_sample(x, rows, cols).astype(x.dtype, copy=False)


def random_resize_crop(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Crop a random rectangle from an edge-replicated canvas and resize it back.

    The canvas is the input centred inside ``max(1, max_scale)`` times its extent
    along each axis; crop offsets are uniform over positions that fit the canvas.
    """
    h, w = x.shape
    fs = rng.uniform(*cfg.crop_freq_scale)
    ts = rng.uniform(*cfg.crop_time_scale)
    ch, cw = fs * h, ts * w
    canvas_h = max(1.0, cfg.crop_freq_scale[1]) * h
    canvas_w = max(1.0, cfg.crop_time_scale[1]) * w
    top = (h - canvas_h) / 2 + rng.uniform(0.0, max(canvas_h - ch, 0.0))
    left = (w - canvas_w) / 2 + rng.uniform(0.0, max(canvas_w - cw, 0.0))
    return crop_resize(x, top, left, ch, cw)


def linear_fader(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Add a gain ramp, linear in time and constant over frequency (dB -> nepers)."""
    g0, g1 = rng.uniform(*cfg.fader_db_range, size=2) / DB_PER_NEPER
    ramp = np.linspace(g0, g1, x.shape[1])
    return (x + ramp[None, :]).astype(x.dtype, copy=False)


def augment_view(x: np.ndarray, mem: MixupMemory, cfg: AugmentConfig,
                 rng: np.random.Generator) -> np.ndarray:
    lam = rng.uniform(0.0, cfg.mixup_max_ratio)
    y = mixup_log(x, mem, lam, rng)
    y = random_resize_crop(y, cfg, rng)
    return linear_fader(y, cfg, rng)


def augment_pair(x: np.ndarray, mem: MixupMemory, cfg: AugmentConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent mixup -> resize-crop -> fader views of x."""
    return augment_view(x, mem, cfg, rng), augment_view(x, mem, cfg, rng)
