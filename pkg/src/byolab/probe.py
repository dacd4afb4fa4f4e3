"""Linear-probe transfer evaluation on frozen embeddings."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .network import AdamState, NumericError, adam_step


class DegenerateTaskError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


# epochs used for specific corpora; everything else uses the default 50
EPOCH_PRESETS = {"default": 50, "nsynth": 25, "ava-speech": 10}


@dataclass
class ProbeConfig:
    epochs: int = 50
    lr: float = 1e-4
    plateau_patience: int = 5
    lr_factor: float = 0.1
    min_lr: float = 1e-6
    binary: bool = False
    positive_label: str | None = None
    class_weighting: bool = True
    batch_size: int | None = 32
    select_by: str = "loss"
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.select_by not in ("loss", "accuracy"):
            raise ValueError("select_by must be 'loss' or 'accuracy'")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None (full batch)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProbeResult:
    metric_name: str
    metric: float
    accuracy: float
    best_epoch: int
    classes: list[str]
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    lr_reductions: int = 0
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, json_path, curve_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if curve_path is not None:
            with open(curve_path, "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["epoch", "train_loss", "val_loss", "lr"])
                for i, (a, b, c) in enumerate(zip(self.train_losses, self.val_losses, self.learning_rates)):
                    wr.writerow([i + 1, repr(a), repr(b), repr(c)])


# --------------------------------------------------------------------------
# metrics


def class_weights(counts) -> np.ndarray:
    """w_c = N / (C * n_c)."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts < 1):
        raise ValueError("every class needs at least one example")
    return counts.sum() / (counts.size * counts)


def accuracy(predictions, labels) -> float:
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels) or not labels:
        raise ValueError("accuracy needs equal-length, non-empty inputs")
    return float(np.mean([p == l for p, l in zip(predictions, labels)]))


def average_precision(scores, labels) -> float:
    """Mean over positives of the precision at each positive's rank.

    Items are ranked by descending score; ties keep input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float(np.sum((tp / ranks)[hits]) / n_pos)


# --------------------------------------------------------------------------
# training


class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` epochs without a new best."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.1, min_lr: float = 1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0
        self.reductions = 0

    def step(self, value: float) -> float:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                new = max(self.lr * self.factor, self.min_lr)
                if new < self.lr:
                    self.reductions += 1
                self.lr = new
                self.bad_epochs = 0
        return self.lr


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def weighted_cross_entropy(logits, y, weights):
    """Weighted mean NLL (normalised by the summed sample weights) and d/dlogits."""
    logp = _log_softmax(logits)
    w = weights[y]
    loss = -np.sum(w * logp[np.arange(len(y)), y]) / w.sum()
    grad = np.exp(logp)
    grad[np.arange(len(y)), y] -= 1.0
    grad *= (w / w.sum())[:, None]
    return float(loss), grad


def weighted_binary_cross_entropy(logits, y, weights):
    z = logits[:, 0]
    w = weights[y]
    # log(1 + exp(-|z|)) form is stable for large |z|
    nll = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = np.sum(w * nll) / w.sum()
    sig = 1.0 / (1.0 + np.exp(-z))
    grad = ((sig - y) * w / w.sum())[:, None]
    return float(loss), grad


@dataclass
class LinearProbe:
    w: np.ndarray
    b: np.ndarray
    classes: list[str]
    binary: bool
    mean: np.ndarray
    std: np.ndarray

    def logits(self, x):
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.std) @ self.w + self.b

    def scores(self, x):
        """Positive-class probability (binary) or softmax probabilities."""
        z = self.logits(x)
        if self.binary:
            return 1.0 / (1.0 + np.exp(-z[:, 0]))
        return np.exp(_log_softmax(z))

    def predict(self, x) -> list[str]:
        z = self.logits(x)
        idx = (z[:, 0] > 0).astype(int) if self.binary else z.argmax(axis=1)
        return [self.classes[i] for i in idx]


@dataclass
class FitState:
    probe: LinearProbe
    best_epoch: int
    train_losses: list[float]
    val_losses: list[float]
    learning_rates: list[float]
    lr_reductions: int


def _encode(labels, classes, what):
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[l] for l in labels], dtype=int)
    except KeyError as exc:
        raise ValueError(f"{what} label {exc.args[0]!r} not present in training classes") from exc


def fit_probe(x_train, y_train, x_val, y_val, cfg: ProbeConfig | None = None) -> FitState:
    """Train the linear map; the validation-best weights are kept."""
    cfg = cfg or ProbeConfig()
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    classes = sorted(set(y_train))
    if len(classes) < 2:
        raise DegenerateTaskError("training labels contain a single class")
    if cfg.binary:
        if len(classes) != 2:
            raise DegenerateTaskError(f"binary probe needs exactly two classes, got {len(classes)}")
        if cfg.positive_label is not None:
            if cfg.positive_label not in classes:
                raise ValueError(f"positive label {cfg.positive_label!r} not in training labels")
            classes = [c for c in classes if c != cfg.positive_label] + [cfg.positive_label]
    ytr = _encode(y_train, classes, "train")
    yva = _encode(y_val, classes, "validation")
    if len(yva) == 0:
        raise ValueError("validation partition is empty")

    counts = np.bincount(ytr, minlength=len(classes))
    weights = class_weights(counts) if cfg.class_weighting else np.ones(len(classes))
    loss_fn = weighted_binary_cross_entropy if cfg.binary else weighted_cross_entropy

    if cfg.standardize:
        mean = x_train.mean(axis=0)
        std = np.maximum(x_train.std(axis=0), 1e-8)
    else:
        mean = np.zeros(x_train.shape[1])
        std = np.ones(x_train.shape[1])
    xtr = (x_train - mean) / std
    xva = (x_val - mean) / std

    n_out = 1 if cfg.binary else len(classes)
    params = {"w": np.zeros((x_train.shape[1], n_out)), "b": np.zeros(n_out)}
    opt = AdamState(lr=cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_patience, cfg.lr_factor, cfg.min_lr)
    rng = np.random.default_rng(cfg.seed)
    bs = len(xtr) if cfg.batch_size is None else cfg.batch_size

    best = (np.inf, -1, params["w"].copy(), params["b"].copy())
    train_losses, val_losses, lrs = [], [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(xtr)) if cfg.batch_size is not None else np.arange(len(xtr))
        batch_losses = []
        for s in range(0, len(xtr), bs):
            idx = order[s:s + bs]
            z = xtr[idx] @ params["w"] + params["b"]
            loss, dz = loss_fn(z, ytr[idx], weights)
            if not np.isfinite(loss):
                raise NumericError(f"probe loss became non-finite at epoch {epoch + 1}")
            grads = {"w": xtr[idx].T @ dz, "b": dz.sum(axis=0)}
            adam_step(params, grads, opt)
            batch_losses.append(loss * len(idx))
        train_losses.append(float(np.sum(batch_losses) / len(xtr)))
        zv = xva @ params["w"] + params["b"]
        vloss, _ = loss_fn(zv, yva, weights)
        val_losses.append(vloss)
        lrs.append(opt.lr)
        if cfg.select_by == "loss":
            key = vloss
        else:
            pred = (zv[:, 0] > 0).astype(int) if cfg.binary else zv.argmax(axis=1)
            key = -float(np.mean(pred == yva))
        if key < best[0]:
            best = (key, epoch, params["w"].copy(), params["b"].copy())
        opt.lr = sched.step(vloss)

    probe = LinearProbe(best[2] / std[:, None], best[3] - (mean / std) @ best[2], classes, cfg.binary,
                        np.zeros_like(mean), np.ones_like(std))
    return FitState(probe, best[1] + 1, train_losses, val_losses, lrs, sched.reductions)


def score_probe(state: FitState, x_test, y_test, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Score the fitted probe on the test partition (the only use of test labels)."""
    cfg = cfg or ProbeConfig()
    probe = state.probe
    pred = probe.predict(x_test)
    acc = accuracy(pred, y_test)
    idx = {c: i for i, c in enumerate(probe.classes)}
    conf = np.zeros((len(probe.classes), len(probe.classes)), dtype=int)
    for p, t in zip(pred, y_test):
        if t in idx:
            conf[idx[t], idx[p]] += 1
    if cfg.binary:
        positive = probe.classes[1]
        metric_name = "average_precision"
        metric = average_precision(probe.scores(x_test), [t == positive for t in y_test])
    else:
        metric_name, metric = "accuracy", acc
    return ProbeResult(metric_name, metric, acc, state.best_epoch, list(probe.classes),
                       state.train_losses, state.val_losses, state.learning_rates,
                       state.lr_reductions, conf.tolist())


def train_probe(x_train, y_train, x_val, y_val, x_test, y_test, cfg: ProbeConfig | None = None) -> ProbeResult:
    cfg = cfg or ProbeConfig()
    state = fit_probe(x_train, y_train, x_val, y_val, cfg)
    return score_probe(state, x_test, y_test, cfg)


def probe_table(table, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Run the probe on an EmbeddingTable's train/validation/test partitions."""
    xtr, ytr = table.select("train")
    xva, yva = table.select("validation")
    xte, yte = table.select("test")
    if len(yte) == 0:
        raise ValueError("embedding table has no test rows")
    return train_probe(xtr, ytr, xva, yva, xte, yte, cfg)
