"""Tests for the numpy network layers, models and checkpoints."""

from __future__ import annotations

import math

import numpy as np
import pytest

from symmetry_cad.exceptions import NonFiniteError, SchemaVersionError, ShapeMismatchError
from symmetry_cad.nnet import (
    NetworkSpec,
    baseline_forward,
    glorot_init,
    gradient_check,
    load_checkpoint,
    loss_and_gradients,
    parameter_count,
    save_checkpoint,
    symmetry_forward,
)
from symmetry_cad.nnet import layers
from symmetry_cad.nnet.network import parameter_shapes, stream_features

SEEDS = range(20)
TOLERANCE = 1e-5


def _tiny(kind="baseline") -> NetworkSpec:
    return NetworkSpec.reduced(kind, stages=2, input_size_px=16, conv_filters=(3, 4), dense_units=(6, 5, 2))


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.permutation(math.prod(shape)).reshape(shape) * 0.01


def test_conv_matches_hand_computed_sums():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)

    out, _ = layers.conv2d_forward(x, np.ones((1, 1, 3, 3)), np.array([1.0]))

    np.testing.assert_array_equal(out[0, 0], [[46, 55], [82, 91]])


def test_conv_rejects_wrong_channels():
    with pytest.raises(ShapeMismatchError):
        layers.conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_maxpool_picks_window_maxima_and_routes_gradients():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)

    out, cache = layers.maxpool_forward(x, 3, 2)
    dx = layers.maxpool_backward(np.ones_like(out), cache)

    np.testing.assert_array_equal(out[0, 0], [[12, 14], [22, 24]])
    assert dx.sum() == 4
    assert dx[0, 0, 2, 2] == dx[0, 0, 2, 4] == dx[0, 0, 4, 2] == dx[0, 0, 4, 4] == 1


def test_gap_dense_and_softmax_values():
    pooled, _ = layers.gap_forward(np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2))
    np.testing.assert_array_equal(pooled, [[1.5, 5.5]])

    dense, _ = layers.dense_forward(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0], [0.0, 3.0]]), np.array([0.5, 0.0]))
    np.testing.assert_array_equal(dense, [[1.5, 6.0]])

    probs, _ = layers.softmax_forward(np.array([[0.0, math.log(3.0)], [1000.0, 1000.0]]))
    np.testing.assert_allclose(probs, [[0.25, 0.75], [0.5, 0.5]])


def test_cross_entropy_clamps_zero_probability():
    loss, _ = layers.cross_entropy_forward(np.array([[0.0, 1.0]]), np.array([0]))

    assert loss == pytest.approx(-math.log(1e-12))


def test_dropout_is_identity_at_inference():
    x = np.ones((4, 6))

    out, cache = layers.dropout_forward(x, 0.5, training=False)

    assert out is x
    assert layers.dropout_backward(x, cache) is x


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    upstream = rng.standard_normal((2, 3, 4, 4))

    def objective():
        return float((layers.conv2d_forward(x, w, b)[0] * upstream).sum())

    _, cache = layers.conv2d_forward(x, w, b)
    dx, dw, db = layers.conv2d_backward(upstream, cache)

    assert gradient_check(objective, x, dx) < TOLERANCE
    assert gradient_check(objective, w, dw) < TOLERANCE
    assert gradient_check(objective, b, db) < TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    x = _distinct(rng, (2, 2, 7, 7))
    upstream = rng.standard_normal((2, 2, 3, 3))

    def objective():
        return float((layers.maxpool_forward(x, 3, 2)[0] * upstream).sum())

    _, cache = layers.maxpool_forward(x, 3, 2)

    assert gradient_check(objective, x, layers.maxpool_backward(upstream, cache), eps=1e-4) < TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_gap_and_dense_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 5, 5))
    w = rng.standard_normal((4, 2))
    b = rng.standard_normal(2)
    upstream = rng.standard_normal((3, 2))

    def objective():
        pooled, _ = layers.gap_forward(x)
        return float((layers.dense_forward(pooled, w, b)[0] * upstream).sum())

    pooled, gap_cache = layers.gap_forward(x)
    _, dense_cache = layers.dense_forward(pooled, w, b)
    dpooled, dw, db = layers.dense_backward(upstream, dense_cache)

    assert gradient_check(objective, x, layers.gap_backward(dpooled, gap_cache)) < TOLERANCE
    assert gradient_check(objective, w, dw) < TOLERANCE
    assert gradient_check(objective, b, db) < TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 2))
    labels = rng.integers(0, 2, size=5)

    def objective():
        return layers.cross_entropy_forward(layers.softmax_forward(logits)[0], labels)[0]

    probs, softmax_cache = layers.softmax_forward(logits)
    _, ce_cache = layers.cross_entropy_forward(probs, labels)
    chained = layers.softmax_backward(layers.cross_entropy_backward(ce_cache), softmax_cache)
    fused = layers.softmax_cross_entropy_backward(probs, labels)

    np.testing.assert_allclose(chained, fused, atol=1e-12)
    assert gradient_check(objective, logits, fused) < TOLERANCE


@pytest.mark.parametrize("kind", ["baseline", "symmetry"])
@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_gradients_with_dropout(kind, seed):
    spec = _tiny(kind)
    rng = np.random.default_rng(seed)
    params = glorot_init(spec, rng)
    for name in params:
        if name.endswith(".bias"):
            params[name] = 0.1 * rng.standard_normal(params[name].shape)
    shape = (4, 16, 16)
    inputs = rng.random(shape) if kind == "baseline" else (rng.random(shape), rng.random(shape))
    labels = np.array([0, 1, 1, 0])

    def objective():
        return loss_and_gradients(spec, params, inputs, labels, rng=np.random.default_rng(99))[0]

    _, grads, _ = loss_and_gradients(spec, params, inputs, labels, rng=np.random.default_rng(99))

    assert set(grads) == set(params)
    for name, value in params.items():
        error = gradient_check(objective, value, grads[name], eps=1e-7, max_entries=10, rng=rng)
        assert error < 1e-4, name


def test_glorot_bound_of_last_dense_layer():
    params = glorot_init(NetworkSpec.full(), np.random.default_rng(0))

    weights = params["head.dense3.weight"]
    bound = math.sqrt(6.0 / 302.0)
    assert weights.shape == (300, 2)
    assert np.abs(weights).max() <= bound
    assert np.abs(weights).max() > 0.9 * bound
    assert not params["head.dense3.bias"].any()


def test_probabilities_are_distributions():
    spec = _tiny()
    params = glorot_init(spec, np.random.default_rng(1))

    probs = baseline_forward(params, np.random.default_rng(2).random((6, 16, 16)), spec=spec)

    assert probs.shape == (6, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    assert probs.min() >= 0.0


@pytest.mark.parametrize("kind", ["baseline", "symmetry"])
def test_zero_input_with_zero_biases_is_undecided(kind):
    spec = _tiny(kind)
    params = glorot_init(spec, np.random.default_rng(3))
    zeros = np.zeros((2, 16, 16))

    if kind == "baseline":
        probs = baseline_forward(params, zeros, spec=spec)
    else:
        probs = symmetry_forward(params, (zeros, zeros), spec=spec)

    np.testing.assert_allclose(probs, 0.5)


def test_swapping_inputs_matches_swapping_streams():
    spec = _tiny("symmetry")
    rng = np.random.default_rng(4)
    params = glorot_init(spec, rng)
    primary, partner = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    width = spec.conv_filters[-1]

    swapped = {}
    for name, value in params.items():
        if name.startswith("stream1."):
            swapped[name] = params[name.replace("stream1.", "stream2.", 1)]
        elif name.startswith("stream2."):
            swapped[name] = params[name.replace("stream2.", "stream1.", 1)]
        else:
            swapped[name] = value
    dense1 = params["head.dense1.weight"]
    swapped["head.dense1.weight"] = np.concatenate([dense1[width:], dense1[:width]])

    np.testing.assert_allclose(
        symmetry_forward(params, (primary, partner), spec=spec),
        symmetry_forward(swapped, (partner, primary), spec=spec),
        atol=1e-12,
    )


def test_zero_partner_ignores_second_stream_weights():
    spec = _tiny("symmetry")
    rng = np.random.default_rng(5)
    params = glorot_init(spec, rng)
    primary, zeros = rng.random((3, 16, 16)), np.zeros((3, 16, 16))
    other = dict(params)
    for name in params:
        if name.startswith("stream2.") and name.endswith(".weight"):
            other[name] = rng.standard_normal(params[name].shape)

    assert not stream_features(params, "stream2", zeros, spec).any()
    np.testing.assert_allclose(
        symmetry_forward(params, (primary, zeros), spec=spec),
        symmetry_forward(other, (primary, zeros), spec=spec),
    )


def test_symmetry_model_adds_one_extractor_and_wider_first_dense():
    base, sym = NetworkSpec.full("baseline"), NetworkSpec.full("symmetry")
    extractor = sum(math.prod(s) for n, s in parameter_shapes(base).items() if n.startswith("features."))

    assert parameter_count(sym) == parameter_count(base) + extractor + 128 * 300


def test_full_network_needs_381_pixels():
    with pytest.raises(ShapeMismatchError):
        NetworkSpec(input_size_px=380)

    assert NetworkSpec.full().feature_sizes() == [381, 189, 93, 45, 21, 9, 3]


@pytest.mark.parametrize(
    "kwargs",
    [{"kind": "siamese"}, {"conv_kernel": 4}, {"dense_units": (300, 2)}, {"dropout_rate": 1.0}, {"conv_filters": ()}],
)
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        NetworkSpec(**kwargs)


def test_predictions_follow_batch_order():
    spec = _tiny()
    rng = np.random.default_rng(6)
    params = glorot_init(spec, rng)
    batch = rng.random((7, 16, 16))
    order = rng.permutation(7)

    np.testing.assert_allclose(
        baseline_forward(params, batch[order], spec=spec),
        baseline_forward(params, batch, spec=spec)[order],
        atol=1e-12,
    )


def test_wrong_patch_size_is_rejected():
    spec = _tiny()

    with pytest.raises(ShapeMismatchError):
        baseline_forward(glorot_init(spec, np.random.default_rng(0)), np.zeros((1, 15, 15)), spec=spec)


def test_non_finite_activation_names_the_layer():
    spec = _tiny()
    params = glorot_init(spec, np.random.default_rng(7))
    params["features.conv1.weight"][0, 0, 0, 0] = np.inf

    with pytest.raises(NonFiniteError, match="features.conv1"):
        baseline_forward(params, np.ones((1, 16, 16)), spec=spec)


def test_checkpoint_round_trip(tmp_path):
    spec = _tiny("symmetry")
    params = glorot_init(spec, np.random.default_rng(8))

    save_checkpoint(tmp_path / "symmetry.ckpt", spec, params, epoch=4, val_auc=0.81, provenance={"seed": 8})
    loaded_spec, loaded, header = load_checkpoint(tmp_path / "symmetry.ckpt")

    assert loaded_spec == spec
    assert header["epoch"] == 4
    assert header["val_auc"] == pytest.approx(0.81)
    assert header["provenance"] == {"seed": 8}
    for name, value in params.items():
        assert loaded[name].dtype == np.float32
        np.testing.assert_array_equal(loaded[name], value.astype(np.float32))


def test_checkpoint_with_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(16))

    with pytest.raises(SchemaVersionError):
        load_checkpoint(path)


def test_checkpoint_rejects_mismatched_parameters(tmp_path):
    spec = _tiny()
    params = glorot_init(spec, np.random.default_rng(9))
    del params["head.dense3.bias"]

    with pytest.raises(ShapeMismatchError):
        save_checkpoint(tmp_path / "x.ckpt", spec, params, epoch=0, val_auc=None)
