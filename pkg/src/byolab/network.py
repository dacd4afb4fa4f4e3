"""Convolutional audio encoder, MLP heads and Adam, with hand-written gradients.

Tensors are channels-last internally: a batch of spectrograms ``[B, F, T]`` is
lifted to ``[B, F, T, 1]`` and each conv block maps ``[B, H, W, C]`` to
``[B, H // 2, W // 2, 64]``. Parameters live in flat ``dict[str, ndarray]``
objects so optimizers, EMA and checkpoints can treat every model uniformly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CHANNELS = 64


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class EncoderConfig:
    n_mels: int = 64
    width: int = 256
    dropout: float = 0.3
    pooling: str = "concat"      # "concat" -> 2W, "sum" -> W
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.n_mels < 4:
            raise ValueError("n_mels must be >= 4 (two 2x2 pooling stages)")
        if self.pooling not in ("concat", "sum"):
            raise ValueError(f"pooling must be 'concat' or 'sum', got {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def frame_dim(self) -> int:
        return CHANNELS * (self.n_mels // 4)

    @property
    def embed_dim(self) -> int:
        return 2 * self.width if self.pooling == "concat" else self.width

    @classmethod
    def paper_scale(cls) -> "EncoderConfig":
        return cls(width=2048)


@dataclass
class HeadConfig:
    hidden: int = 512
    out: int = 128


# --------------------------------------------------------------------------
# layers: each forward returns (out, cache); each backward returns grads


def conv3x3_forward(x, w, b, keep_cols=True):
    """x [B,H,W,Cin], w [Cout,Cin,3,3], b [Cout]; stride 1, zero padding 1."""
    B, H, W, Cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = cols.reshape(B * H * W, Cin * 9)
    wmat = w.reshape(w.shape[0], -1).T
    out = (cols @ wmat + b).reshape(B, H, W, -1)
    return out, ((cols if keep_cols else None), x.shape, w)


def conv3x3_backward(dout, cache):
    cols, shape, w = cache
    B, H, W, Cin = shape
    cout = w.shape[0]
    d2 = dout.reshape(-1, cout)
    dw = (d2.T @ cols).reshape(w.shape)
    db = _channel_sum(d2)
    if Cin == 1:
        dcols = (d2 @ w.reshape(cout, -1)).reshape(B, H, W, 3, 3)
        dxp = np.zeros((B, H + 2, W + 2), dtype=dout.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + H, j:j + W] += dcols[..., i, j]
        return dxp[:, 1:-1, 1:-1, None], dw, db
    # input gradient is the 'same' convolution of dout with the flipped, transposed kernel
    w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv3x3_forward(dout, w_rot, np.zeros(Cin, dtype=dout.dtype), keep_cols=False)
    return dx, dw, db


def _channel_sum(x2d):
    # BLAS reduction over rows; much faster than ndarray.sum on tall matrices
    return np.ones(x2d.shape[0], dtype=x2d.dtype) @ x2d


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Normalizes over every axis but the last. Updates running stats in place when training."""
    x2 = x.reshape(-1, x.shape[-1])
    if train:
        n = x2.shape[0]
        if n < 2:
            raise ShapeError("train-mode batch-norm needs more than one value per channel")
        mu = _channel_sum(x2) / n
        xc = x2 - mu
        var = _channel_sum(xc * xc) / n
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
        xc = x2 - mu
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    out = (xhat * gamma + beta).reshape(x.shape)
    return out, (xhat, gamma, inv, train)


def batchnorm_backward(dout, cache):
    xhat, gamma, inv, train = cache
    d2 = dout.reshape(-1, dout.shape[-1])
    dgamma = _channel_sum(d2 * xhat)
    dbeta = _channel_sum(d2)
    if not train:
        return (d2 * (gamma * inv)).reshape(dout.shape), dgamma, dbeta
    n = d2.shape[0]
    # dxhat = d2 * gamma, so its channel sums are gamma * (dbeta, dgamma)
    dx = (gamma * inv / n) * (n * d2 - dbeta - xhat * dgamma)
    return dx.reshape(dout.shape), dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def maxpool2x2_forward(x):
    """2x2 max pool, stride 2, over axes 1 and 2; odd extents are truncated."""
    B, H, W, C = x.shape
    h2, w2 = H // 2, W // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"cannot pool extent {H}x{W}")
    quads = [x[:, i:2 * h2:2, j:2 * w2:2, :] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    return out, (x, out)


def maxpool2x2_backward(dout, cache):
    # gradient goes to the first maximal element in (0,0), (0,1), (1,0), (1,1) order
    x, out = cache
    B, H, W, C = x.shape
    h2, w2 = out.shape[1:3]
    dx = np.zeros_like(x, dtype=dout.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for i in (0, 1):
        for j in (0, 1):
            hit = (x[:, i:2 * h2:2, j:2 * w2:2, :] == out) & ~taken
            dx[:, i:2 * h2:2, j:2 * w2:2, :] = dout * hit
            taken |= hit
    return dx


def dense_forward(x, w, b):
    return x @ w + b, x


def dense_grads(dout, x, w):
    """Returns (dx, dw, db) for ``x @ w + b`` with any number of leading axes."""
    lead = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ w.T, lead.T @ d2, _channel_sum(d2)


def dropout_forward(x, rate, rng, train):
    if not train or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def temporal_pool_forward(x, mode="concat"):
    """x [B, T, W] -> concat(mean_t, max_t) [B, 2W] (or their sum, [B, W])."""
    mean = x.mean(axis=1)
    idx = x.argmax(axis=1)
    mx = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
    out = np.concatenate([mean, mx], axis=1) if mode == "concat" else mean + mx
    return out, (x.shape, idx, mode)


def temporal_pool_backward(dout, cache):
    shape, idx, mode = cache
    B, T, W = shape
    if mode == "concat":
        dmean, dmax = dout[:, :W], dout[:, W:]
    else:
        dmean = dmax = dout
    dx = np.repeat((dmean / T)[:, None, :], T, axis=1)
    np.put_along_axis(dx, idx[:, None, :], np.take_along_axis(dx, idx[:, None, :], axis=1) + dmax[:, None, :], axis=1)
    return dx


# --------------------------------------------------------------------------
# parameter initialization


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
    """Returns (params, buffers). Conv/dense weights ~ N(0, 2 / fan_in)."""
    p = {
        "conv1.w": _he(rng, (CHANNELS, 1, 3, 3), 9, dtype),
        "conv1.b": np.zeros(CHANNELS, dtype),
        "bn1.gamma": np.ones(CHANNELS, dtype),
        "bn1.beta": np.zeros(CHANNELS, dtype),
        "conv2.w": _he(rng, (CHANNELS, CHANNELS, 3, 3), 9 * CHANNELS, dtype),
        "conv2.b": np.zeros(CHANNELS, dtype),
        "bn2.gamma": np.ones(CHANNELS, dtype),
        "bn2.beta": np.zeros(CHANNELS, dtype),
        "fc1.w": _he(rng, (cfg.frame_dim, cfg.width), cfg.frame_dim, dtype),
        "fc1.b": np.zeros(cfg.width, dtype),
        "fc2.w": _he(rng, (cfg.width, cfg.width), cfg.width, dtype),
        "fc2.b": np.zeros(cfg.width, dtype),
    }
    buffers = {
        "bn1.running_mean": np.zeros(CHANNELS, dtype),
        "bn1.running_var": np.ones(CHANNELS, dtype),
        "bn2.running_mean": np.zeros(CHANNELS, dtype),
        "bn2.running_var": np.ones(CHANNELS, dtype),
    }
    return p, buffers


def init_head(in_dim: int, cfg: HeadConfig, rng: np.random.Generator, prefix: str, dtype=np.float32):
    p = {
        f"{prefix}.fc1.w": _he(rng, (in_dim, cfg.hidden), in_dim, dtype),
        f"{prefix}.fc1.b": np.zeros(cfg.hidden, dtype),
        f"{prefix}.bn.gamma": np.ones(cfg.hidden, dtype),
        f"{prefix}.bn.beta": np.zeros(cfg.hidden, dtype),
        f"{prefix}.fc2.w": _he(rng, (cfg.hidden, cfg.out), cfg.hidden, dtype),
        f"{prefix}.fc2.b": np.zeros(cfg.out, dtype),
    }
    buffers = {
        f"{prefix}.bn.running_mean": np.zeros(cfg.hidden, dtype),
        f"{prefix}.bn.running_var": np.ones(cfg.hidden, dtype),
    }
    return p, buffers


# --------------------------------------------------------------------------
# encoder


@dataclass
class Cache:
    kind: str
    data: dict
    shape: tuple
    used: bool = field(default=False)


def _as_batch(x, cfg: EncoderConfig):
    x = np.asarray(x)
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 3 or x.shape[1] != cfg.n_mels:
        raise ShapeError(f"expected [B, {cfg.n_mels}, T] or [B, 1, {cfg.n_mels}, T], got {x.shape}")
    if x.shape[2] < 4:
        raise ShapeError(f"need T >= 4 frames, got {x.shape[2]}")
    if x.shape[0] < 1:
        raise ShapeError("empty batch")
    return x


def encoder_forward(x, params, buffers, cfg: EncoderConfig, mode="eval", rng=None, grad=None):
    """Embeds a batch of normalized spectrograms.

    ``mode="train"`` uses batch statistics (updating the running ones in place)
    and dropout; ``mode="eval"`` is deterministic. A cache usable by
    :func:`encoder_backward` is kept when ``grad`` is true (default: train mode).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    grad = train if grad is None else grad
    x = _as_batch(x, cfg)
    if train and x.shape[0] < 2:
        raise ShapeError("train mode needs a batch of at least 2")
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    dtype = params["conv1.w"].dtype
    h = x.astype(dtype, copy=False)[..., None]
    c = {}
    for i in (1, 2):
        h, c[f"conv{i}"] = conv3x3_forward(h, params[f"conv{i}.w"], params[f"conv{i}.b"], keep_cols=grad)
        h, c[f"bn{i}"] = batchnorm_forward(h, params[f"bn{i}.gamma"], params[f"bn{i}.beta"],
                                           buffers[f"bn{i}.running_mean"], buffers[f"bn{i}.running_var"],
                                           train, cfg.bn_momentum, cfg.bn_eps)
        h, c[f"relu{i}"] = relu_forward(h)
        h, c[f"pool{i}"] = maxpool2x2_forward(h)
    B, F2, T2, C = h.shape
    c["frames_shape"] = h.shape
    h = h.transpose(0, 2, 1, 3).reshape(B, T2, F2 * C)
    h, c["fc1"] = dense_forward(h, params["fc1.w"], params["fc1.b"])
    h, c["relu3"] = relu_forward(h)
    h, c["drop"] = dropout_forward(h, cfg.dropout, rng, train)
    h, c["fc2"] = dense_forward(h, params["fc2.w"], params["fc2.b"])
    h, c["relu4"] = relu_forward(h)
    out, c["tpool"] = temporal_pool_forward(h, cfg.pooling)
    cache = Cache("encoder", c if grad else {}, out.shape)
    cache.data["grad"] = grad
    return out, cache


def encoder_backward(cache: Cache, grad_out, params):
    """Reverse-mode gradients for every encoder parameter plus ``"input"``."""
    if not isinstance(cache, Cache) or cache.kind != "encoder" or not cache.data.get("grad"):
        raise StateError("encoder_backward needs a cache from encoder_forward(..., grad=True)")
    if cache.used:
        raise StateError("cache already consumed by a previous backward pass")
    if grad_out.shape != cache.shape:
        raise StateError(f"grad_out shape {grad_out.shape} does not match forward output {cache.shape}")
    cache.used = True
    c = cache.data
    g = {}
    d = temporal_pool_backward(grad_out, c["tpool"])
    d = relu_backward(d, c["relu4"])
    d, g["fc2.w"], g["fc2.b"] = dense_grads(d, c["fc2"], params["fc2.w"])
    d = dropout_backward(d, c["drop"])
    d = relu_backward(d, c["relu3"])
    d, g["fc1.w"], g["fc1.b"] = dense_grads(d, c["fc1"], params["fc1.w"])
    B, F2, T2, C = c["frames_shape"]
    d = d.reshape(B, T2, F2, C).transpose(0, 2, 1, 3)
    for i in (2, 1):
        d = maxpool2x2_backward(d, c[f"pool{i}"])
        d = relu_backward(d, c[f"relu{i}"])
        d, g[f"bn{i}.gamma"], g[f"bn{i}.beta"] = batchnorm_backward(d, c[f"bn{i}"])
        d, g[f"conv{i}.w"], g[f"conv{i}.b"] = conv3x3_backward(d, c[f"conv{i}"])
    g["input"] = d[..., 0]
    return g


# --------------------------------------------------------------------------
# heads: Linear -> BN -> ReLU -> Linear


def head_forward(x, params, buffers, prefix, mode="eval", grad=None, momentum=0.1, eps=1e-5):
    train = mode == "train"
    grad = train if grad is None else grad
    c = {}
    h, c["fc1"] = dense_forward(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"])
    h, c["bn"] = batchnorm_forward(h, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"],
                                   buffers[f"{prefix}.bn.running_mean"], buffers[f"{prefix}.bn.running_var"],
                                   train, momentum, eps)
    h, c["relu"] = relu_forward(h)
    out, c["fc2"] = dense_forward(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])
    cache = Cache(prefix, c if grad else {}, out.shape)
    cache.data["grad"] = grad
    return out, cache


def head_backward(cache: Cache, grad_out, params):
    if not isinstance(cache, Cache) or not cache.data.get("grad"):
        raise StateError("head_backward needs a cache from head_forward(..., grad=True)")
    if cache.used:
        raise StateError("cache already consumed by a previous backward pass")
    if grad_out.shape != cache.shape:
        raise StateError(f"grad_out shape {grad_out.shape} does not match forward output {cache.shape}")
    cache.used = True
    p, c = cache.kind, cache.data
    g = {}
    d, g[f"{p}.fc2.w"], g[f"{p}.fc2.b"] = dense_grads(grad_out, c["fc2"], params[f"{p}.fc2.w"])
    d = relu_backward(d, c["relu"])
    d, g[f"{p}.bn.gamma"], g[f"{p}.bn.beta"] = batchnorm_backward(d, c["bn"])
    d, g[f"{p}.fc1.w"], g[f"{p}.fc1.b"] = dense_grads(d, c["fc1"], params[f"{p}.fc1.w"])
    g["input"] = d
    return g


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, keys=None):
    """Bias-corrected Adam update applied in place to ``params``."""
    keys = list(params) if keys is None else list(keys)
    for k in keys:
        if grads[k].shape != params[k].shape:
            raise ShapeError(f"{k}: gradient shape {grads[k].shape} != parameter shape {params[k].shape}")
        if not np.all(np.isfinite(grads[k])):
            raise NumericError(f"non-finite gradient for {k} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k in keys:
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(params[k]))
        v = state.v.setdefault(k, np.zeros_like(params[k]))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[k] -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(params[k].dtype)
    return params, state


# --------------------------------------------------------------------------
# gradient verification


def finite_difference_check(loss_fn, params: dict, eps: float = 1e-5, n_coords: int = 200,
                            rng=None, floor: float = 1e-6, keys=None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> (loss, grads)`` must be deterministic. Coordinates
    are sampled evenly across parameter tensors. The relative error is
    ``|a - n| / max(|a|, |n|, floor)`` so gradients that vanish exactly
    are compared in absolute terms.
    """
    rng = rng or np.random.default_rng(0)
    keys = list(params) if keys is None else list(keys)
    _, grads = loss_fn(params)
    worst = 0.0
    per_key = max(1, -(-n_coords // len(keys)))
    for k in keys:
        flat = params[k].reshape(-1)
        picks = rng.choice(flat.size, size=min(per_key, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            lp, _ = loss_fn(params)
            flat[i] = old - eps
            lm, _ = loss_fn(params)
            flat[i] = old
            num = (lp - lm) / (2.0 * eps)
            ana = grads[k].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, float(err))
    return worst


# --------------------------------------------------------------------------
# binary container: magic, u32 header length, JSON header, raw little-endian f32 tensors

MAGIC = b"BYOLAB\x00\x01"


def write_container(path, header: dict, tensors: dict) -> None:
    """Tensors are written as float32 in insertion order; the header records the order."""
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a byolab container")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    pos = 12 + n
    tensors = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, "<f4", count=count, offset=pos).reshape(t["shape"])
        tensors[t["name"]] = arr.astype(np.float32)
        pos += 4 * count
    if pos != len(data):
        raise ValueError(f"{path}: trailing or missing tensor bytes")
    return header, tensors
