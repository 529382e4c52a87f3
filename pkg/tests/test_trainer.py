"""Tests for batch scheduling, the optimizer and the training loop."""

from __future__ import annotations

import itertools
import threading
import time

import numpy as np
import pytest

from symmetry_cad.exceptions import (
    InsufficientDataError,
    NonFiniteError,
    SchemaVersionError,
    ShapeMismatchError,
    UndefinedMetricError,
)
from symmetry_cad.nnet import NetworkSpec, glorot_init
from symmetry_cad.patches import AugmentConfig, PatchArchive
from symmetry_cad.trainer import (
    EpochRecord,
    TrainConfig,
    TrainingLog,
    assemble_batch,
    learning_rate,
    make_epoch_schedule,
    predict,
    prefetch,
    read_training_log,
    sgd_step,
    train,
    transfer_from_baseline,
)


def _archive(n_pos: int, n_neg: int, size: int, *, seed: int = 0, partner: bool = True) -> PatchArchive:
    rng = np.random.default_rng(seed)
    primary = np.concatenate(
        [rng.uniform(0.6, 1.0, (n_pos, size, size)), rng.uniform(0.0, 0.4, (n_neg, size, size))]
    ).astype(np.float32)
    contralateral = rng.uniform(0.0, 0.4, primary.shape).astype(np.float32) if partner else np.zeros_like(primary)
    n = n_pos + n_neg
    return PatchArchive(
        primary=primary,
        contralateral=contralateral,
        labels=np.array([1] * n_pos + [0] * n_neg, dtype=np.uint8),
        has_contralateral=np.full(n, int(partner), dtype=np.uint8),
        index=[],
    )


def _one_stage(kind="baseline") -> NetworkSpec:
    return NetworkSpec.reduced(kind, stages=1, input_size_px=8, conv_filters=(4,), dense_units=(4, 4, 2))


def test_epoch_schedule_is_balanced():
    positives, negatives = np.arange(10), np.arange(10, 60)

    schedule = make_epoch_schedule(positives, negatives, TrainConfig(batch_size=8), np.random.default_rng(0))

    assert len(schedule) == 5
    pos_seen = np.concatenate([pos for pos, _ in schedule.batches])
    neg_seen = np.concatenate([neg for _, neg in schedule.batches])
    assert all(len(pos) == len(neg) == 4 for pos, neg in schedule.batches)
    assert np.array_equal(np.bincount(pos_seen), np.full(10, 2))
    assert len(set(neg_seen.tolist())) == 20
    assert set(neg_seen.tolist()) <= set(negatives.tolist())


@pytest.mark.parametrize("seed", range(20))
def test_default_batches_are_32_and_32(seed):
    rng = np.random.default_rng(seed)
    positives = np.arange(int(rng.integers(16, 80)) * 16)
    negatives = np.arange(len(positives), len(positives) + 3 * len(positives))

    schedule = make_epoch_schedule(positives, negatives, TrainConfig(), rng)

    assert all(len(pos) == len(neg) == 32 for pos, neg in schedule.batches)
    pos_seen = np.concatenate([pos for pos, _ in schedule.batches])
    assert np.array_equal(np.bincount(pos_seen, minlength=len(positives)), np.full(len(positives), 2))


def test_ragged_last_batch_is_dropped():
    schedule = make_epoch_schedule(np.arange(10), np.arange(10, 40), TrainConfig(batch_size=6), np.random.default_rng(1))

    assert len(schedule) == 6
    assert sum(len(pos) for pos, _ in schedule.batches) == 18


def test_epoch_schedule_needs_enough_data():
    with pytest.raises(InsufficientDataError):
        make_epoch_schedule([0], np.arange(1, 50), TrainConfig(batch_size=8), np.random.default_rng(0))
    with pytest.raises(InsufficientDataError):
        make_epoch_schedule(np.arange(10), np.arange(10, 25), TrainConfig(batch_size=8), np.random.default_rng(0))


def test_learning_rate_decays_per_update():
    cfg = TrainConfig(initial_lr=1e-2, decay=1e-2)

    assert learning_rate(cfg, 0) == pytest.approx(1e-2)
    assert learning_rate(cfg, 1) == pytest.approx(1e-2 / 1.01)
    assert TrainConfig(initial_lr=1e-3).decay == pytest.approx(5e-6)


@pytest.mark.parametrize(
    "kwargs",
    [{"initial_lr": 0.0}, {"momentum": 1.0}, {"batch_size": 7}, {"patience_epochs": 0}, {"decay": -1.0}],
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_sgd_with_momentum():
    cfg = TrainConfig(initial_lr=0.1, decay=0.0, momentum=0.9)
    params = {"w": np.array([1.0])}
    grads = {"w": np.array([2.0])}

    first, state = sgd_step(params, grads, {}, cfg, 0)
    second, _ = sgd_step(first, grads, state, cfg, 1)

    np.testing.assert_allclose(first["w"], [0.8])
    np.testing.assert_allclose(second["w"], [0.42])
    np.testing.assert_array_equal(params["w"], [1.0])


def test_sgd_rejects_bad_gradients():
    cfg = TrainConfig()
    params = {"w": np.zeros(3)}

    with pytest.raises(NonFiniteError, match="grad w"):
        sgd_step(params, {"w": np.array([0.0, np.nan, 0.0])}, {}, cfg, 5)
    with pytest.raises(ShapeMismatchError):
        sgd_step(params, {"w": np.zeros(4)}, {}, cfg, 0)


def test_transfer_copies_extractor_into_both_streams():
    base_spec = NetworkSpec.reduced(stages=2, input_size_px=16, conv_filters=(3, 4), dense_units=(6, 5, 2))
    baseline = glorot_init(base_spec, np.random.default_rng(0))

    params = transfer_from_baseline(baseline, base_spec.with_kind("symmetry"), np.random.default_rng(1))

    for stream in ("stream1", "stream2"):
        for layer in ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"):
            np.testing.assert_array_equal(params[f"{stream}.{layer}"], baseline[f"features.{layer}"])
    params["stream1.conv1.weight"][0, 0, 0, 0] += 1.0
    assert params["stream2.conv1.weight"][0, 0, 0, 0] == baseline["features.conv1.weight"][0, 0, 0, 0]
    assert params["head.dense1.weight"].shape == (8, 6)


def test_transfer_rejects_incompatible_extractor():
    baseline = glorot_init(NetworkSpec.reduced(stages=1, input_size_px=8, conv_filters=(4,)), np.random.default_rng(0))
    target = NetworkSpec.reduced("symmetry", stages=1, input_size_px=8, conv_filters=(5,))

    with pytest.raises(ShapeMismatchError):
        transfer_from_baseline(baseline, target, np.random.default_rng(0))


def test_prefetch_keeps_order_and_bounds_lookahead():
    started = []
    lock = threading.Lock()

    def make(i):
        with lock:
            started.append(i)
        time.sleep(0.001)
        return i * i

    seen = []
    for item in prefetch(make, 7, capacity=2):
        with lock:
            assert len(started) <= len(seen) + 3
        seen.append(item)

    assert seen == [i * i for i in range(7)]
    assert list(prefetch(make, 0)) == []


def test_assemble_batch_keeps_zero_partners_under_augmentation():
    data = _archive(4, 8, 16, partner=False)
    spec = NetworkSpec.reduced("symmetry", stages=2, input_size_px=16, conv_filters=(3, 4))

    (primary, partner), labels = assemble_batch(
        spec, data, np.arange(4), np.arange(4, 8), AugmentConfig(apply_probability=1.0), np.random.default_rng(0)
    )

    assert labels.tolist() == [1, 1, 1, 1, 0, 0, 0, 0]
    assert primary.shape == partner.shape == (8, 16, 16)
    assert not partner.any()


def test_training_log_round_trip(tmp_path):
    log = TrainingLog(tmp_path / "baseline_log.ndjson", kind="baseline", provenance={"seed": 3})
    records = [EpochRecord(1, 0.7, 0.01, 0.6, 0.6), EpochRecord(2, 0.5, 0.0099, 0.55, 0.6)]
    for record in records:
        log.write(record)

    header, loaded = read_training_log(tmp_path / "baseline_log.ndjson")

    assert header["kind"] == "baseline"
    assert header["provenance"] == {"seed": 3}
    assert loaded == records


def test_training_log_version_is_checked(tmp_path):
    path = tmp_path / "old_log.ndjson"
    path.write_text('{"schema_version": 0}\n')

    with pytest.raises(SchemaVersionError):
        read_training_log(path)


def test_early_stop_returns_best_epoch(tmp_path):
    spec = _one_stage()
    params = glorot_init(spec, np.random.default_rng(0))
    data = _archive(4, 20, 8)
    cfg = TrainConfig(batch_size=4, patience_epochs=3, max_epochs=50, augment=False, seed=2)
    aucs = itertools.count()
    log = TrainingLog(tmp_path / "log.ndjson", kind="baseline", provenance={})

    best, history = train(spec, params, data, data, cfg, log=log, validate=lambda p: 0.9 - 0.1 * next(aucs))
    first, _ = train(
        spec, params, data, data, TrainConfig(batch_size=4, max_epochs=1, augment=False, seed=2), validate=lambda p: 0.5
    )

    assert [r.epoch for r in history] == [1, 2, 3, 4]
    assert all(r.best_so_far == pytest.approx(0.9) for r in history)
    assert history[0].lr_last == pytest.approx(learning_rate(cfg, 3))
    assert len(read_training_log(tmp_path / "log.ndjson")[1]) == 4
    for name in params:
        np.testing.assert_array_equal(best[name], first[name])
        assert best[name].dtype == np.float32


def test_training_is_deterministic():
    spec = _one_stage("symmetry")
    params = glorot_init(spec, np.random.default_rng(1))
    data = _archive(4, 12, 8, seed=1)
    cfg = TrainConfig(batch_size=4, max_epochs=3, seed=5)

    first = train(spec, params, data, data, cfg)
    second = train(spec, params, data, data, cfg)

    assert first[1] == second[1]
    for name in params:
        np.testing.assert_array_equal(first[0][name], second[0][name])


def test_single_class_validation_is_rejected():
    spec = _one_stage()
    params = glorot_init(spec, np.random.default_rng(0))

    with pytest.raises(UndefinedMetricError):
        train(spec, params, _archive(4, 12, 8), _archive(0, 6, 8), TrainConfig(batch_size=4, max_epochs=1))


def test_learns_separable_patches():
    spec = NetworkSpec.reduced(stages=2, input_size_px=16, conv_filters=(8, 8), dense_units=(16, 16, 2))
    params = glorot_init(spec, np.random.default_rng(0))
    cfg = TrainConfig(batch_size=16, max_epochs=30, patience_epochs=30, augment=False, seed=0)

    best, history = train(spec, params, _archive(16, 48, 16, seed=0), _archive(10, 30, 16, seed=1), cfg)

    assert max(r.val_auc for r in history) >= 0.95
    assert np.all(np.isfinite(predict(spec, best, _archive(2, 2, 16, seed=2))))


def test_symmetry_model_trains_with_missing_partners():
    spec = NetworkSpec.reduced("symmetry", stages=1, input_size_px=8, conv_filters=(4,), dense_units=(4, 4, 2))
    params = glorot_init(spec, np.random.default_rng(3))
    data = _archive(4, 12, 8, partner=False)

    best, history = train(spec, params, data, data, TrainConfig(batch_size=4, max_epochs=2, seed=1))

    assert len(history) == 2
    scores = predict(spec, best, data)
    assert scores.shape == (16,)
    assert np.all((scores >= 0) & (scores <= 1))
