import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from byolab.network import (AdamState, EncoderConfig, NumericError, ShapeError, StateError, adam_step,
                            batchnorm_forward, encoder_backward, encoder_forward, finite_difference_check,
                            init_encoder, read_container, write_container)

from gradcheck import composed_case, layer_cases

CASES = layer_cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_layer_gradients(name):
    params, fn = CASES[name]
    params = {k: v.copy() for k, v in params.items()}
    assert finite_difference_check(fn, params, eps=1e-5, n_coords=200) < 1e-5


def test_composed_gradient_eval_mode():
    model, fn = composed_case()
    params = {k: v.copy() for k, v in model.params.items()}
    assert finite_difference_check(fn, params, eps=1e-5, n_coords=240) < 1e-4


# biases that feed a train-mode batch-norm have an exact gradient of zero
BN_FED = ("conv1.b", "conv2.b", "projector.fc1.b", "projector.fc2.b", "predictor.fc1.b")


def test_composed_gradient_train_mode():
    model, fn = composed_case(mode="train", batch=4)
    params = {k: v.copy() for k, v in model.params.items()}
    keys = [k for k in params if k not in BN_FED]
    assert finite_difference_check(fn, params, eps=1e-5, n_coords=240, keys=keys) < 1e-4
    _, grads = fn(params)
    for k in BN_FED:
        assert np.max(np.abs(grads[k])) < 1e-9


def test_fd_check_on_polynomials():
    p = {"a": np.random.default_rng(0).standard_normal(50)}
    # central differences are exact for a quadratic; a wide step keeps cancellation roundoff small
    half_sq = lambda q: (0.5 * float(q["a"] @ q["a"]), {"a": q["a"].copy()})  # noqa: E731
    assert finite_difference_check(half_sq, p, eps=0.1) < 1e-10
    c = np.random.default_rng(1).standard_normal(50)
    assert finite_difference_check(lambda q: (float(c @ q["a"]), {"a": c.copy()}), p, eps=0.1) < 1e-12


def small(width=16, dropout=0.3):
    cfg = EncoderConfig(width=width, dropout=dropout)
    params, buffers = init_encoder(cfg, np.random.default_rng(0), np.float64)
    return cfg, params, buffers


def test_output_shape_example():
    cfg = EncoderConfig(width=256)
    params, buffers = init_encoder(cfg, np.random.default_rng(0))
    out, _ = encoder_forward(np.zeros((8, 1, 64, 96), np.float32), params, buffers, cfg)
    assert out.shape == (8, 512)


@given(st.integers(4, 128))
def test_embed_dim_for_any_length(t):
    cfg, params, buffers = small(8)
    out, _ = encoder_forward(np.ones((1, 64, t)), params, buffers, cfg)
    assert out.shape == (1, 16)


def test_eval_is_deterministic_and_batch_independent(rng):
    cfg, params, buffers = small()
    x = rng.standard_normal((5, 64, 12))
    a, _ = encoder_forward(x, params, buffers, cfg)
    b, _ = encoder_forward(x, params, buffers, cfg)
    perm = rng.permutation(5)
    c, _ = encoder_forward(x[perm], params, buffers, cfg)
    assert np.array_equal(a, b)
    assert np.allclose(c, a[perm], atol=1e-12)


def test_sum_pooling_switch(rng):
    cfg = EncoderConfig(width=8, pooling="sum")
    params, buffers = init_encoder(cfg, rng, np.float64)
    out, _ = encoder_forward(rng.standard_normal((2, 64, 8)), params, buffers, cfg)
    assert out.shape == (2, 8) and cfg.embed_dim == 8


def test_shape_errors(rng):
    cfg, params, buffers = small()
    with pytest.raises(ShapeError):
        encoder_forward(rng.standard_normal((2, 32, 8)), params, buffers, cfg)
    with pytest.raises(ShapeError):
        encoder_forward(rng.standard_normal((2, 64, 3)), params, buffers, cfg)
    with pytest.raises(ShapeError):
        encoder_forward(rng.standard_normal((1, 64, 8)), params, buffers, cfg, "train", rng)


def test_backward_linearity_and_cache_errors(rng):
    cfg, params, buffers = small(dropout=0.0)
    x = rng.standard_normal((3, 64, 8))
    g = rng.standard_normal((3, 32))

    def grads(scale):
        _, cache = encoder_forward(x, params, {k: v.copy() for k, v in buffers.items()}, cfg, "train", rng)
        return encoder_backward(cache, g * scale, params)

    zero, one, two = grads(0.0), grads(1.0), grads(2.0)
    for k in zero:
        assert np.all(zero[k] == 0)
        assert np.allclose(two[k], 2 * one[k], rtol=1e-10, atol=1e-12)

    _, cache = encoder_forward(x, params, buffers, cfg, "train", rng)
    encoder_backward(cache, g, params)
    with pytest.raises(StateError):
        encoder_backward(cache, g, params)
    _, cache = encoder_forward(x, params, buffers, cfg, "eval")
    with pytest.raises(StateError):
        encoder_backward(cache, g, params)
    _, cache = encoder_forward(x, params, buffers, cfg, "train", rng)
    with pytest.raises(StateError):
        encoder_backward(cache, g[:, :5], params)


def test_running_stats_converge(rng):
    x = rng.normal(2.0, 3.0, (40, 6))
    rm, rv = np.zeros(6), np.ones(6)
    for _ in range(200):
        batchnorm_forward(x, np.ones(6), np.zeros(6), rm, rv, True)
    assert np.allclose(rm, x.mean(axis=0), atol=1e-3)
    assert np.allclose(rv, x.var(axis=0, ddof=1), atol=1e-3)


def test_adam_examples():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert p["w"].tolist() == [1.0, -2.0]
    p = {"w": np.array([0.5])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(lr=0.1))
    assert p["w"][0] == pytest.approx(0.4, abs=1e-6)
    with pytest.raises(NumericError):
        adam_step(p, {"w": np.array([np.inf])}, AdamState())
    with pytest.raises(ShapeError):
        adam_step(p, {"w": np.zeros(2)}, AdamState())


def test_adam_descends_quadratic():
    p = {"w": np.array([3.0])}
    state = AdamState(lr=0.05)
    losses = []
    for _ in range(50):
        losses.append(float((p["w"][0] - 1.0) ** 2))
        adam_step(p, {"w": 2 * (p["w"] - 1.0)}, state)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_container_round_trip(tmp_path, rng):
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    write_container(tmp_path / "c.bin", {"hello": "world"}, tensors)
    header, back = read_container(tmp_path / "c.bin")
    assert header["hello"] == "world" and [t["name"] for t in header["tensors"]] == ["a", "b"]
    assert all(np.array_equal(tensors[k], back[k]) for k in tensors)
    raw = (tmp_path / "c.bin").read_bytes()
    write_container(tmp_path / "d.bin", {"hello": "world"}, tensors)
    assert (tmp_path / "d.bin").read_bytes() == raw
    (tmp_path / "e.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_container(tmp_path / "e.bin")
