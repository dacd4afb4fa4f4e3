"""BYOL pre-training loop, EMA target network and clip embedding extraction."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import Manifest, Waveform, read_wav, resample_linear
from .augment import AugmentConfig, MixupMemory, augment_pair
from .frontend import FrontendConfig, NormStats, fit_norm_stats, logmel, normalize
from .network import (
    AdamState, EncoderConfig, HeadConfig, NumericError, adam_step, encoder_backward,
    encoder_forward, head_backward, head_forward, init_encoder, init_head, read_container,
    write_container,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "byolab-checkpoint/1"
EMBEDDING_FORMAT = "byolab-embeddings/1"


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    tau: float = 0.99
    crop_frames: int = 96
    seed: int = 0
    norm_samples: int = 10000
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.heads, dict):
            self.heads = HeadConfig(**self.heads)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (train-mode batch-norm)")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.crop_frames < 4:
            raise ValueError("crop_frames must be >= 4")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper_scale(cls) -> "PretrainConfig":
        return cls(epochs=100, encoder=EncoderConfig.paper_scale())


# --------------------------------------------------------------------------
# loss and target update


def _cosine_terms(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    pn = np.linalg.norm(pred, axis=-1, keepdims=True)
    tn = np.linalg.norm(target, axis=-1, keepdims=True)
    if np.any(pn == 0) or np.any(tn == 0):
        raise NumericError("byol_loss is undefined for zero vectors")
    cos = np.sum(pred * target, axis=-1, keepdims=True) / (pn * tn)
    return pred, target, pn, tn, cos


def byol_loss(pred, target) -> float:
    """Mean over the batch of 2 - 2 cos(pred, target); 1-D inputs are one item."""
    *_, cos = _cosine_terms(np.atleast_2d(pred), np.atleast_2d(target))
    return float(np.mean(2.0 - 2.0 * cos))


def byol_loss_grad(pred, target) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. ``pred`` (the target is a constant)."""
    p, t, pn, tn, cos = _cosine_terms(pred, target)
    n = p.shape[0]
    dcos = t / (pn * tn) - cos * p / pn ** 2
    return float(np.mean(2.0 - 2.0 * cos)), -2.0 * dcos / n


def symmetric_byol_loss(p1, z2, p2, z1):
    """0.5 * (loss(p1, z2) + loss(p2, z1)) and gradients for p1 and p2."""
    l1, g1 = byol_loss_grad(p1, z2)
    l2, g2 = byol_loss_grad(p2, z1)
    return 0.5 * (l1 + l2), 0.5 * g1, 0.5 * g2


def ema_update(target: dict, online: dict, tau: float) -> dict:
    """target <- tau * target + (1 - tau) * online, in place, for every target key."""
    for k, t in target.items():
        o = online[k]
        if o.shape != t.shape:
            raise ValueError(f"{k}: shape mismatch {t.shape} vs {o.shape}")
        t *= tau
        t += (1.0 - tau) * o
    return target


# --------------------------------------------------------------------------
# model state


@dataclass
class ByolModel:
    cfg: PretrainConfig
    params: dict           # online encoder + projector + predictor
    buffers: dict
    target_params: dict    # encoder + projector
    target_buffers: dict

    @classmethod
    def create(cls, cfg: PretrainConfig, rng: np.random.Generator, dtype=np.float32) -> "ByolModel":
        enc, enc_buf = init_encoder(cfg.encoder, rng, dtype)
        proj, proj_buf = init_head(cfg.encoder.embed_dim, cfg.heads, rng, "projector", dtype)
        pred, pred_buf = init_head(cfg.heads.out, cfg.heads, rng, "predictor", dtype)
        params = {**enc, **proj, **pred}
        buffers = {**enc_buf, **proj_buf, **pred_buf}
        target_keys = [k for k in params if not k.startswith("predictor.")]
        target_buf_keys = [k for k in buffers if not k.startswith("predictor.")]
        return cls(cfg, params, buffers,
                   {k: params[k].copy() for k in target_keys},
                   {k: buffers[k].copy() for k in target_buf_keys})

    def online(self, x, mode="train", rng=None, grad=None):
        """Returns (prediction, caches)."""
        e, c_enc = encoder_forward(x, self.params, self.buffers, self.cfg.encoder, mode, rng, grad)
        z, c_proj = head_forward(e, self.params, self.buffers, "projector", mode, grad)
        p, c_pred = head_forward(z, self.params, self.buffers, "predictor", mode, grad)
        return p, (c_enc, c_proj, c_pred)

    def online_backward(self, caches, dp) -> dict:
        c_enc, c_proj, c_pred = caches
        g = head_backward(c_pred, dp, self.params)
        g.update(head_backward(c_proj, g.pop("input"), self.params))
        g.update(encoder_backward(c_enc, g.pop("input"), self.params))
        g.pop("input")
        return g

    def target(self, x):
        # target runs with its own running batch-norm statistics
        e, _ = encoder_forward(x, self.target_params, self.target_buffers, self.cfg.encoder, "eval")
        z, _ = head_forward(e, self.target_params, self.target_buffers, "projector", "eval")
        return z

    def embed(self, x):
        """Online encoder embedding in eval mode."""
        e, _ = encoder_forward(x, self.params, self.buffers, self.cfg.encoder, "eval", grad=False)
        return e


def _cast_like(d: dict, ref: dict) -> dict:
    return {k: np.asarray(v, dtype=ref[k].dtype) for k, v in d.items()}


def save_checkpoint(path, model: ByolModel, stats: NormStats, frontend: FrontendConfig,
                    step: int, epoch: int, extra: dict | None = None) -> None:
    tensors = {}
    for prefix, d in (("online", model.params), ("online_buf", model.buffers),
                      ("target", model.target_params), ("target_buf", model.target_buffers)):
        for k, v in d.items():
            tensors[f"{prefix}/{k}"] = v
    header = {
        "format": CHECKPOINT_FORMAT,
        "pretrain": model.cfg.to_dict(),
        "frontend": frontend.to_dict(),
        "norm_stats": stats.to_dict(),
        "step": step,
        "epoch": epoch,
    }
    if extra:
        header.update(extra)
    write_container(path, header, tensors)


@dataclass
class Checkpoint:
    model: ByolModel
    stats: NormStats
    frontend: FrontendConfig
    header: dict


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_container(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a pre-training checkpoint")
    cfg = PretrainConfig(**header["pretrain"])
    groups: dict[str, dict] = {"online": {}, "online_buf": {}, "target": {}, "target_buf": {}}
    for name, arr in tensors.items():
        prefix, key = name.split("/", 1)
        groups[prefix][key] = arr.copy()
    model = ByolModel(cfg, groups["online"], groups["online_buf"], groups["target"], groups["target_buf"])
    return Checkpoint(model, NormStats.from_dict(header["norm_stats"]),
                      FrontendConfig(**header["frontend"]), header)


# --------------------------------------------------------------------------
# data


def load_audio(path, frontend: FrontendConfig) -> Waveform:
    w = read_wav(path)
    if w.sample_rate != frontend.sample_rate:
        w = resample_linear(w, frontend.sample_rate)
    return w


def clip_logmel(path, frontend: FrontendConfig, min_frames: int = 0) -> np.ndarray:
    """Log-mel of a clip, zero-padding the audio so it yields at least ``min_frames``."""
    w = load_audio(path, frontend)
    need = max(frontend.n_fft, (min_frames - 1) * frontend.hop_length if frontend.center
               else (min_frames - 1) * frontend.hop_length + frontend.n_fft)
    if len(w) < need:
        w = Waveform(np.pad(w.samples, (0, need - len(w))), w.sample_rate)
    return logmel(w, frontend).values


def random_crop(spec: np.ndarray, frames: int, rng: np.random.Generator) -> np.ndarray:
    t = spec.shape[1]
    if t <= frames:
        if t < frames:
            spec = np.pad(spec, ((0, 0), (0, frames - t)), mode="edge")
        return spec
    start = int(rng.integers(t - frames + 1))
    return spec[:, start:start + frames]


def fit_stats_from_manifest(manifest: Manifest, frontend: FrontendConfig, n_samples: int = 10000,
                            seed: int = 0, specs: list | None = None) -> NormStats:
    """Fit NormStats on up to ``n_samples`` randomly chosen train clips."""
    train = manifest.partition("train")
    if not train:
        raise ValueError("no train entries to fit normalization statistics on")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(train), size=min(n_samples, len(train)), replace=False)
    pick.sort()
    if specs is None:
        chosen = [clip_logmel(manifest.resolve(train[i]), frontend) for i in pick]
    else:
        chosen = [specs[i] for i in pick]
    return fit_norm_stats(chosen, per_bin=frontend.per_bin_stats)


# --------------------------------------------------------------------------
# training


@dataclass
class PretrainResult:
    checkpoint: Path
    step_losses: list[float]
    epoch_losses: list[float]
    stats: NormStats


def pretrain(manifest: Manifest, frontend: FrontendConfig, augment: AugmentConfig,
             cfg: PretrainConfig, out_dir, stats: NormStats | None = None) -> PretrainResult:
    """Train an online/target BYOL pair on the manifest's train partition.

    Writes ``checkpoint.bin`` after every epoch and ``loss.csv`` (step, epoch,
    loss). Normalization statistics are fitted on train clips unless given.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = manifest.partition("train")
    if len(train) < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} train clips, have {len(train)}")

    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, augment.seed])
    specs = [clip_logmel(manifest.resolve(e), frontend, cfg.crop_frames) for e in train]
    if stats is None:
        stats = fit_stats_from_manifest(manifest, frontend, cfg.norm_samples, cfg.seed, specs)
    specs = [normalize(s, stats).astype(np.float32) for s in specs]

    model = ByolModel.create(cfg, rng)
    opt = AdamState(lr=cfg.lr)
    memory = MixupMemory(augment.memory_size)
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    ckpt = out_dir / "checkpoint.bin"
    n_batches = len(train) // cfg.batch_size

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            v1, v2 = [], []
            for i in idx:
                a, c = augment_pair(random_crop(specs[i], cfg.crop_frames, rng), memory, augment, aug_rng)
                v1.append(a)
                v2.append(c)
            v1 = np.stack(v1).astype(np.float32)
            v2 = np.stack(v2).astype(np.float32)

            p1, c1 = model.online(v1, "train", rng)
            p2, c2 = model.online(v2, "train", rng)
            z1 = model.target(v1)
            z2 = model.target(v2)
            loss, g1, g2 = symmetric_byol_loss(p1, z2, p2, z1)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, step {opt.step + 1}")
            grads = model.online_backward(c1, g1.astype(np.float32))
            for k, v in model.online_backward(c2, g2.astype(np.float32)).items():
                grads[k] += v
            adam_step(model.params, grads, opt)
            ema_update(model.target_params, model.params, cfg.tau)
            ema_update(model.target_buffers, model.buffers, cfg.tau)
            losses.append(loss)
            step_losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, epoch_losses[-1])
        save_checkpoint(ckpt, model, stats, frontend, opt.step, epoch + 1,
                        {"augment": augment.to_dict(), "dataset": manifest.dataset_name})

    with open(out_dir / "loss.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "epoch", "loss"])
        for s, l in enumerate(step_losses):
            wr.writerow([s + 1, s // n_batches + 1, repr(l)])
    return PretrainResult(ckpt, step_losses, epoch_losses, stats)


# --------------------------------------------------------------------------
# embedding extraction


@dataclass
class EmbeddingTable:
    paths: list[str]
    labels: list[str]
    partitions: list[str]
    groups: list[str | None]
    embeddings: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.paths)

    def select(self, partition: str) -> tuple[np.ndarray, list[str]]:
        idx = [i for i, p in enumerate(self.partitions) if p == partition]
        return self.embeddings[idx], [self.labels[i] for i in idx]

    def save(self, path) -> None:
        rows = [{"path": p, "label": l, "partition": s, "group": g}
                for p, l, s, g in zip(self.paths, self.labels, self.partitions, self.groups)]
        header = {"format": EMBEDDING_FORMAT, "rows": rows, "dim": int(self.embeddings.shape[1]),
                  **self.meta}
        write_container(path, header, {"embeddings": self.embeddings})

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        header, tensors = read_container(path)
        if header.get("format") != EMBEDDING_FORMAT:
            raise ValueError(f"{path}: not an embedding file")
        rows = header.pop("rows")
        for k in ("format", "dim", "tensors"):
            header.pop(k, None)
        return cls([r["path"] for r in rows], [r["label"] for r in rows],
                   [r["partition"] for r in rows], [r.get("group") for r in rows],
                   tensors["embeddings"].astype(np.float64), header)


def window_starts(n_frames: int, window: int, hop: int) -> list[int]:
    if n_frames <= window:
        return [0]
    return list(range(0, n_frames - window + 1, hop))


def embed_spectrogram(model: ByolModel, spec: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Average of eval-mode embeddings over consecutive windows of a normalized log-mel."""
    if spec.shape[1] < window:
        raise ValueError("spectrogram shorter than one window")
    starts = window_starts(spec.shape[1], window, hop)
    batch = np.stack([spec[:, s:s + window] for s in starts]).astype(np.float32)
    return model.embed(batch).astype(np.float64).mean(axis=0)


def embed(manifest: Manifest, checkpoint, window: float | None = None, hop: float | None = None,
          out_path=None) -> EmbeddingTable:
    """One embedding per manifest entry, in manifest order.

    ``window``/``hop`` are in seconds and default to the training crop length.
    The checkpoint's stored NormStats are used; nothing is refit.
    """
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    fe = ck.frontend
    win_frames = ck.model.cfg.crop_frames if window is None else int(round(window / fe.frame_hop_seconds))
    hop_frames = win_frames if hop is None else int(round(hop / fe.frame_hop_seconds))
    if win_frames < 4 or hop_frames < 1:
        raise ValueError("window must cover at least 4 frames and hop at least 1")
    rows = []
    for e in manifest.entries:
        spec = normalize(clip_logmel(manifest.resolve(e), fe, win_frames), ck.stats)
        rows.append(embed_spectrogram(ck.model, spec, win_frames, hop_frames))
    meta = {"window_frames": win_frames, "hop_frames": hop_frames, "dataset": manifest.dataset_name}
    if not isinstance(checkpoint, Checkpoint):
        meta["checkpoint_sha256"] = hashlib.sha256(Path(checkpoint).read_bytes()).hexdigest()
    table = EmbeddingTable([e.path for e in manifest.entries], [e.label for e in manifest.entries],
                           [e.partition for e in manifest.entries], [e.group for e in manifest.entries],
                           np.asarray(rows, dtype=np.float64).reshape(len(rows), -1), meta)
    if out_path is not None:
        table.save(out_path)
    return table
