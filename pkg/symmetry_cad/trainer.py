"""Model training.

Every epoch shows each positive pair twice, against an equal number of
negatives sampled afresh, in batches that are half positive and half
negative. Parameters follow SGD with momentum and a time-based learning
rate decay. The epoch with the best validation AUC is kept, and training
stops once that AUC has not improved for ``patience_epochs`` epochs.
"""

from __future__ import annotations

import collections
import json
import logging
import typing as t
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from symmetry_cad.evaluation import auc_from_scores
from symmetry_cad.exceptions import InsufficientDataError, NonFiniteError, SchemaVersionError, ShapeMismatchError
from symmetry_cad.nnet.network import (
    NetworkSpec,
    Parameters,
    STREAMS,
    check_parameters,
    forward,
    head_init,
    loss_and_gradients,
    parameter_shapes,
)
from symmetry_cad.patches import AugmentConfig, PatchArchive, augment

logger = logging.getLogger(__name__)

TRAINING_LOG_SCHEMA_VERSION = 1
PREFETCH_CAPACITY = 2
DEFAULT_LR = {"baseline": 1e-2, "symmetry": 1e-3}

_Item = t.TypeVar("_Item")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings; ``decay`` defaults to ``initial_lr / 200``."""

    initial_lr: float = 1e-2
    momentum: float = 0.9
    decay: float | None = None
    batch_size: int = 64
    patience_epochs: int = 20
    max_epochs: int = 200
    augment: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.decay is None:
            object.__setattr__(self, "decay", self.initial_lr / 200.0)
        if self.initial_lr <= 0 or self.decay < 0:  # type: ignore[operator]
            raise ValueError("initial_lr must be positive and decay non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and at least 2, got {self.batch_size}")
        if self.patience_epochs < 1 or self.max_epochs < 1:
            raise ValueError("patience_epochs and max_epochs must be positive")

    @classmethod
    def for_kind(cls, kind: str, **overrides: t.Any) -> TrainConfig:
        """Defaults for ``kind`` with its initial learning rate."""
        overrides.setdefault("initial_lr", DEFAULT_LR[kind])
        return cls(**overrides)


@dataclass(frozen=True)
class EpochSchedule:
    """Balanced batches as (positive indices, negative indices)."""

    batches: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __len__(self) -> int:
        return len(self.batches)


@dataclass(frozen=True)
class EpochRecord:
    """One line of the training log."""

    epoch: int
    mean_loss: float
    lr_last: float
    val_auc: float
    best_so_far: float

    def to_dict(self) -> dict[str, t.Any]:
        return asdict(self)


def make_epoch_schedule(
    positives: t.Sequence[int] | np.ndarray,
    negatives: t.Sequence[int] | np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> EpochSchedule:
    """Balanced batches for one epoch.

    The positives are laid out twice (two independent shuffles) and paired
    with ``2 * len(positives)`` negatives drawn without replacement. A final
    partial batch is dropped.

    Raises:
        InsufficientDataError: If there are too few positives for one batch
            or fewer than twice as many negatives as positives.
    """
    positives = np.asarray(positives)
    negatives = np.asarray(negatives)
    half = cfg.batch_size // 2
    n_slots = 2 * len(positives)
    if n_slots < half:
        raise InsufficientDataError(f"{len(positives)} positives cannot fill a batch of {cfg.batch_size}")
    if len(negatives) < n_slots:
        raise InsufficientDataError(f"need {n_slots} negatives for {len(positives)} positives, got {len(negatives)}")
    pos_slots = np.concatenate([rng.permutation(positives), rng.permutation(positives)])
    neg_slots = rng.choice(negatives, size=n_slots, replace=False)
    n_batches = n_slots // half
    if n_slots % half:
        logger.debug("Dropping %d positive slots of the ragged last batch", n_slots % half)
    return EpochSchedule(
        tuple((pos_slots[b * half : (b + 1) * half], neg_slots[b * half : (b + 1) * half]) for b in range(n_batches))
    )


def learning_rate(cfg: TrainConfig, step_index: int) -> float:
    """Time-based decay: ``initial_lr / (1 + decay * t)`` with t the update count."""
    return cfg.initial_lr / (1.0 + cfg.decay * step_index)  # type: ignore[operator]


def sgd_step(
    params: Parameters,
    grads: Parameters,
    state: dict[str, np.ndarray],
    cfg: TrainConfig,
    step_index: int,
) -> tuple[Parameters, dict[str, np.ndarray]]:
    """One momentum update: ``v <- momentum * v - lr * g``; ``p <- p + v``.

    Returns:
        New parameter and velocity dictionaries (inputs are left untouched).

    Raises:
        NonFiniteError: If a gradient holds NaN or Inf.
        ShapeMismatchError: If a gradient does not match its parameter.
    """
    lr = learning_rate(cfg, step_index)
    new_params: Parameters = {}
    new_state: dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise ShapeMismatchError(f"gradient of {name}: {grad.shape} != {value.shape}")
        if not np.all(np.isfinite(grad)):
            logger.error("Non-finite gradient", extra={"param": name, "step": step_index})
            raise NonFiniteError(f"grad {name}", f"non-finite gradient at step {step_index}")
        velocity = state.get(name)
        update = -lr * grad if velocity is None else cfg.momentum * velocity - lr * grad
        new_state[name] = update.astype(value.dtype, copy=False)
        new_params[name] = value + new_state[name]
    return new_params, new_state


def transfer_from_baseline(
    baseline_params: Parameters,
    symmetry_spec: NetworkSpec,
    rng: np.random.Generator,
) -> Parameters:
    """Symmetry parameters whose two streams start as separate copies of the baseline extractor.

    The classifier head is freshly initialized for the concatenated features.
    """
    if symmetry_spec.kind != "symmetry":
        raise ValueError("transfer target must be a symmetry spec")
    shapes = parameter_shapes(symmetry_spec)
    dtype = next(iter(baseline_params.values())).dtype
    params: Parameters = {}
    for prefix in STREAMS["symmetry"]:
        for name, shape in shapes.items():
            if not name.startswith(f"{prefix}."):
                continue
            source = "features." + name.split(".", 1)[1]
            if source not in baseline_params or baseline_params[source].shape != shape:
                found = baseline_params[source].shape if source in baseline_params else None
                raise ShapeMismatchError(f"{source}: baseline shape {found} does not fit {name} {shape}")
            params[name] = baseline_params[source].copy()
    params.update(head_init(symmetry_spec, rng, dtype=dtype))
    check_parameters(symmetry_spec, params)
    return {name: params[name] for name in shapes}


def model_inputs(
    spec: NetworkSpec, primary: np.ndarray, contralateral: np.ndarray
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Network input for ``spec.kind`` from stacked patches."""
    return primary if spec.kind == "baseline" else (primary, contralateral)


def predict(
    spec: NetworkSpec,
    params: Parameters,
    data: PatchArchive,
    *,
    batch_size: int = 64,
) -> np.ndarray:
    """Malignancy probability of every pair in ``data`` (inference mode)."""
    dtype = next(iter(params.values())).dtype
    scores = np.empty(len(data), dtype=np.float64)
    for start in range(0, len(data), batch_size):
        stop = min(start + batch_size, len(data))
        primary = np.asarray(data.primary[start:stop], dtype=dtype)
        partner = np.asarray(data.contralateral[start:stop], dtype=dtype)
        probs, _ = forward(spec, params, model_inputs(spec, primary, partner), mode="inference")
        scores[start:stop] = probs[:, 1]
    return scores


def assemble_batch(
    spec: NetworkSpec,
    data: PatchArchive,
    positives: np.ndarray,
    negatives: np.ndarray,
    augment_cfg: AugmentConfig | None,
    rng: np.random.Generator,
    dtype: np.dtype = np.float32,
) -> tuple[np.ndarray | tuple[np.ndarray, np.ndarray], np.ndarray]:
    """Stack (and optionally augment) the pairs of one balanced batch."""
    index = np.concatenate([positives, negatives])
    primary, partner = [], []
    for i in index:
        pair = data.pair(int(i))
        if augment_cfg is not None:
            pair = augment(pair, augment_cfg, rng)
        primary.append(pair.primary)
        partner.append(pair.contralateral)
    labels = np.concatenate([np.ones(len(positives), dtype=np.intp), np.zeros(len(negatives), dtype=np.intp)])
    inputs = model_inputs(spec, np.stack(primary).astype(dtype), np.stack(partner).astype(dtype))
    return inputs, labels


def prefetch(make: t.Callable[[int], _Item], count: int, capacity: int = PREFETCH_CAPACITY) -> t.Iterator[_Item]:
    """Yield ``make(0) ... make(count - 1)`` in order, building up to ``capacity`` ahead on a worker thread."""
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="batch") as pool:
        pending: collections.deque = collections.deque()
        upcoming = iter(range(count))
        for i in upcoming:
            pending.append(pool.submit(make, i))
            if len(pending) >= capacity:
                break
        while pending:
            item = pending.popleft().result()
            nxt = next(upcoming, None)
            if nxt is not None:
                pending.append(pool.submit(make, nxt))
            yield item


class TrainingLog:
    """Newline-delimited JSON log; the first line carries schema version and provenance."""

    def __init__(self, path: Path, *, kind: str, provenance: t.Mapping[str, t.Any]) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        header = {"schema_version": TRAINING_LOG_SCHEMA_VERSION, "kind": kind, "provenance": dict(provenance)}
        self.path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")

    def write(self, record: EpochRecord) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def read_training_log(path: Path) -> tuple[dict[str, t.Any], list[EpochRecord]]:
    """Header and epoch records of a training log."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0]) if lines else {}
    if header.get("schema_version") != TRAINING_LOG_SCHEMA_VERSION:
        raise SchemaVersionError(str(path), header.get("schema_version"), TRAINING_LOG_SCHEMA_VERSION)
    return header, [EpochRecord(**json.loads(line)) for line in lines[1:] if line.strip()]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def train(
    spec: NetworkSpec,
    params: Parameters,
    train_data: PatchArchive,
    val_data: PatchArchive,
    cfg: TrainConfig,
    *,
    augment_cfg: AugmentConfig | None = None,
    log: TrainingLog | None = None,
    validate: t.Callable[[Parameters], float] | None = None,
) -> tuple[Parameters, list[EpochRecord]]:
    """Fit ``params`` and return the best-validation parameters with the epoch history.

    Args:
        spec: Model layout.
        params: Starting parameters (copied to float32).
        train_data: Training pairs.
        val_data: Validation pairs; must hold both classes.
        cfg: Optimizer and schedule settings.
        augment_cfg: Online augmentation ranges, used when ``cfg.augment``.
        log: Receives one record per epoch.
        validate: Replaces the validation AUC computation.

    Raises:
        UndefinedMetricError: If the validation set holds a single class.
        InsufficientDataError: If the training set cannot fill balanced batches.
    """
    check_parameters(spec, params)
    val_labels = np.asarray(val_data.labels, dtype=bool)
    if validate is None:
        auc_from_scores(np.zeros(len(val_labels)), val_labels)

        def validate(p: Parameters) -> float:
            return auc_from_scores(predict(spec, p, val_data, batch_size=cfg.batch_size), val_labels)

    labels = np.asarray(train_data.labels, dtype=bool)
    pos_idx, neg_idx = np.flatnonzero(labels), np.flatnonzero(~labels)
    aug = augment_cfg if cfg.augment else None
    if cfg.augment and aug is None:
        aug = AugmentConfig(seed=cfg.seed)

    params = {name: value.astype(np.float32, copy=True) for name, value in params.items()}
    state: dict[str, np.ndarray] = {}
    best_params, best_auc, best_epoch = params, -np.inf, 0
    history: list[EpochRecord] = []
    step = 0
    logger.info(
        "Training",
        extra={"kind": spec.kind, "positives": len(pos_idx), "negatives": len(neg_idx), "validation": len(val_labels)},
    )
    for epoch in range(1, cfg.max_epochs + 1):
        schedule = make_epoch_schedule(pos_idx, neg_idx, cfg, _rng(cfg.seed, epoch, 0))

        def make(b: int, epoch: int = epoch, schedule: EpochSchedule = schedule):
            pos, neg = schedule.batches[b]
            return assemble_batch(spec, train_data, pos, neg, aug, _rng(cfg.seed, epoch, 1, b))

        losses = []
        for b, (inputs, batch_labels) in enumerate(prefetch(make, len(schedule))):
            loss, grads, _ = loss_and_gradients(
                spec, params, inputs, batch_labels, mode="train", rng=_rng(cfg.seed, epoch, 2, b)
            )
            params, state = sgd_step(params, grads, state, cfg, step)
            step += 1
            losses.append(loss)
            logger.debug("epoch %d batch %d loss %.5f", epoch, b, loss)

        val_auc = float(validate(params))
        if val_auc > best_auc:
            best_params, best_auc, best_epoch = params, val_auc, epoch
        record = EpochRecord(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            lr_last=learning_rate(cfg, max(step - 1, 0)),
            val_auc=val_auc,
            best_so_far=float(best_auc),
        )
        history.append(record)
        if log is not None:
            log.write(record)
        logger.info("Epoch finished", extra=record.to_dict())
        if epoch - best_epoch >= cfg.patience_epochs:
            logger.info("Early stop", extra={"epoch": epoch, "best_epoch": best_epoch, "best_auc": best_auc})
            break
    return best_params, history


__all__ = [
    "EpochRecord",
    "EpochSchedule",
    "TrainConfig",
    "TrainingLog",
    "learning_rate",
    "make_epoch_schedule",
    "predict",
    "read_training_log",
    "sgd_step",
    "train",
    "transfer_from_baseline",
]
