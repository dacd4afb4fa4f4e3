"""WAV reading/writing, resampling, fixed-length segmentation and manifests."""
from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PARTITIONS = ("train", "validation", "test")

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE structure."""


class UnsupportedWavError(ValueError):
    """Well-formed WAV using a codec or sample width we do not decode."""


class ManifestSchemaError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        x = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains non-finite samples")
        self.samples = np.clip(x, -1.0, 1.0)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"chunk {cid!r} truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> Waveform:
    """Decode a PCM (8/16/24/32-bit int) or 32/64-bit float WAV file to mono.

    Channels are averaged; integer samples are scaled by 2**(bits-1) so that
    full scale maps into [-1, 1).
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    pcm = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                # sub-format GUID starts with the actual format tag
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif cid == b"data":
            pcm = body
    if fmt is None or pcm is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0:
        raise WavFormatError(f"{path}: invalid channel count or sample rate")
    width = bits // 8
    if block_align != channels * width:
        raise WavFormatError(f"{path}: block_align inconsistent with bit depth")
    n = len(pcm) // block_align
    pcm = pcm[: n * block_align]

    if tag == _PCM:
        if bits == 8:
            x = (np.frombuffer(pcm, np.uint8).astype(np.float64) - 128.0) / 128.0
        elif bits == 16:
            x = np.frombuffer(pcm, "<i2").astype(np.float64) / 32768.0
        elif bits == 24:
            b = np.frombuffer(pcm, np.uint8).reshape(-1, 3).astype(np.int32)
            v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
            v = np.where(v >= 1 << 23, v - (1 << 24), v)
            x = v.astype(np.float64) / float(1 << 23)
        elif bits == 32:
            x = np.frombuffer(pcm, "<i4").astype(np.float64) / float(1 << 31)
        else:
            raise UnsupportedWavError(f"{path}: {bits}-bit PCM not supported")
    elif tag == _IEEE_FLOAT:
        if bits == 32:
            x = np.frombuffer(pcm, "<f4").astype(np.float64)
        elif bits == 64:
            x = np.frombuffer(pcm, "<f8").astype(np.float64)
        else:
            raise UnsupportedWavError(f"{path}: {bits}-bit float not supported")
    else:
        raise UnsupportedWavError(f"{path}: format tag {tag:#x} not supported")

    x = x.reshape(n, channels).mean(axis=1)
    return Waveform(x, rate)


def write_wav(path, w: Waveform, bits: int = 16) -> None:
    """Write a mono WAV; 16-bit PCM by default, ``bits=32`` writes IEEE float."""
    x = np.clip(np.asarray(w.samples, dtype=np.float64), -1.0, 1.0)
    if bits == 16:
        pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag = _PCM
    elif bits == 32:
        pcm = x.astype("<f4").tobytes()
        tag = _IEEE_FLOAT
    else:
        raise UnsupportedWavError(f"writing {bits}-bit audio not supported")
    width = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, w.sample_rate, w.sample_rate * width, width, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(pcm)) + pcm
    if len(pcm) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def resample_linear(w: Waveform, target_rate: int) -> Waveform:
    """Linear-interpolation resampler without anti-alias filtering."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    t = np.arange(n_out) * (w.sample_rate / target_rate)
    y = np.interp(t, np.arange(len(w)), w.samples)
    return Waveform(y, target_rate)


def segment_fixed(w: Waveform, clip_seconds: float) -> list[Waveform]:
    """Split into consecutive non-overlapping clips; the remainder is dropped."""
    if clip_seconds <= 0:
        raise ValueError("clip_seconds must be positive")
    n = int(round(clip_seconds * w.sample_rate))
    count = len(w) // n
    return [Waveform(w.samples[i * n:(i + 1) * n].copy(), w.sample_rate) for i in range(count)]


@dataclass
class ManifestEntry:
    path: str
    label: str
    partition: str
    group: str | None = None

    def to_dict(self) -> dict:
        d = {"path": self.path, "label": self.label, "partition": self.partition}
        if self.group is not None:
            d["group"] = self.group
        return d


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    dataset_name: str = "dataset"
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.partition not in PARTITIONS:
                raise ValueError(f"unknown partition {e.partition!r} for {e.path}")
            if e.path in seen:
                raise ManifestSchemaError(f"duplicate path {e.path!r}")
            seen.add(e.path)

    def __len__(self):
        return len(self.entries)

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(e.partition for e in self.entries)
        return {p: c.get(p, 0) for p in PARTITIONS}

    def partition(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.partition == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def require_train(self) -> None:
        if self.counts["train"] == 0:
            raise ManifestSchemaError(f"manifest {self.dataset_name!r} has no train entries")


def cap_per_class_group(entries: list[ManifestEntry], cap: int) -> list[ManifestEntry]:
    """Keep at most ``cap`` train entries per (label, group), first in file order.

    Non-train entries pass through untouched.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    seen: Counter = Counter()
    out = []
    for e in entries:
        if e.partition == "train":
            key = (e.label, e.group)
            if seen[key] >= cap:
                continue
            seen[key] += 1
        out.append(e)
    return out


def load_manifest(path, cap_per_class_per_group: int | None = None,
                  dataset_name: str | None = None) -> Manifest:
    path = Path(path)
    entries = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestSchemaError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            missing = [k for k in ("path", "label", "partition") if k not in rec]
            if missing:
                raise ManifestSchemaError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            if rec["partition"] not in PARTITIONS:
                raise ValueError(f"{path}:{lineno}: unknown partition {rec['partition']!r}")
            group = rec.get("group")
            entries.append(ManifestEntry(str(rec["path"]), str(rec["label"]), rec["partition"],
                                         None if group is None else str(group)))
    if cap_per_class_per_group is not None:
        entries = cap_per_class_group(entries, cap_per_class_per_group)
    return Manifest(entries, dataset_name or path.stem, root=path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
