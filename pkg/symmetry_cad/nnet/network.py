"""Baseline and two-stream symmetry networks.

Both share the feature extractor layout: ``[conv -> relu -> maxpool]`` for
every stage but the last, then ``conv -> relu -> global average pool``. The
classifier head is ``dense -> relu -> dropout -> dense -> relu -> dense ->
softmax``. The symmetry network runs two extractors with separate weights
and concatenates their pooled features before the head.
"""

from __future__ import annotations

import logging
import math
import typing as t
from dataclasses import asdict, dataclass, field

import numpy as np

from symmetry_cad.exceptions import ShapeMismatchError
from symmetry_cad.nnet import layers
from symmetry_cad.nnet.layers import Layer

logger = logging.getLogger(__name__)

KINDS = ("baseline", "symmetry")
MODES = ("train", "inference")
STREAMS = {"baseline": ("features",), "symmetry": ("stream1", "stream2")}

Parameters = dict[str, np.ndarray]


@dataclass(frozen=True)
class NetworkSpec:
    """Layer graph of one model.

    The default is the full seven-stage extractor on 381 px patches, the
    smallest input for which the map entering the last convolution is still
    as large as its kernel.
    """

    kind: str = "baseline"
    conv_filters: tuple[int, ...] = (16, 32, 32, 64, 64, 128, 128)
    conv_kernel: int = 3
    pool_window: int = 3
    pool_stride: int = 2
    dense_units: tuple[int, ...] = (300, 300, 2)
    dropout_rate: float = 0.5
    input_size_px: int = 381

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        object.__setattr__(self, "dense_units", tuple(int(u) for u in self.dense_units))
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.conv_filters or any(f <= 0 for f in self.conv_filters):
            raise ValueError("conv_filters must be a non-empty list of positive counts")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.pool_window < 1 or self.pool_stride < 1:
            raise ValueError("pool_window and pool_stride must be positive")
        if len(self.dense_units) != 3 or self.dense_units[-1] != 2:
            raise ValueError(f"dense_units must have 3 entries ending in 2, got {list(self.dense_units)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        self.feature_sizes()

    @classmethod
    def full(cls, kind: str = "baseline") -> NetworkSpec:
        """The seven-stage network on 381 px inputs."""
        return cls(kind=kind)

    @classmethod
    def reduced(
        cls,
        kind: str = "baseline",
        *,
        stages: int = 3,
        input_size_px: int = 96,
        conv_filters: t.Sequence[int] | None = None,
        dense_units: t.Sequence[int] = (300, 300, 2),
    ) -> NetworkSpec:
        """A shallower network for desk-scale runs and gradient checks."""
        filters = tuple(conv_filters) if conv_filters is not None else cls.conv_filters[:stages]
        if len(filters) != stages:
            raise ValueError(f"{stages} stages need {stages} filter counts, got {len(filters)}")
        return cls(kind=kind, conv_filters=filters, dense_units=tuple(dense_units), input_size_px=input_size_px)

    def with_kind(self, kind: str) -> NetworkSpec:
        """Same layer sizes, other model kind."""
        return NetworkSpec(**{**asdict(self), "kind": kind})

    @property
    def feature_width(self) -> int:
        """Width of the (concatenated) pooled feature vector entering the head."""
        return self.conv_filters[-1] * len(STREAMS[self.kind])

    def feature_sizes(self) -> list[int]:
        """Spatial extent of the map entering each convolution.

        Raises:
            ShapeMismatchError: If some stage receives a map smaller than its
                kernel or pooling window.
        """
        size = self.input_size_px
        sizes = []
        for i in range(len(self.conv_filters)):
            if size < self.conv_kernel:
                raise ShapeMismatchError(
                    f"input {self.input_size_px} px leaves a {size} px map at conv {i + 1}, "
                    f"smaller than the {self.conv_kernel} px kernel"
                )
            sizes.append(size)
            size = size - self.conv_kernel + 1
            if i < len(self.conv_filters) - 1:
                if size < self.pool_window:
                    raise ShapeMismatchError(
                        f"input {self.input_size_px} px leaves a {size} px map at pool {i + 1}, "
                        f"smaller than the {self.pool_window} px window"
                    )
                size = layers.pool_output_size(size, self.pool_window, self.pool_stride)
        return sizes

    def to_dict(self) -> dict[str, t.Any]:
        """JSON-ready mapping."""
        data = asdict(self)
        data["conv_filters"] = list(self.conv_filters)
        data["dense_units"] = list(self.dense_units)
        return data

    @classmethod
    def from_dict(cls, data: t.Mapping[str, t.Any]) -> NetworkSpec:
        """Inverse of :meth:`to_dict`."""
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def parameter_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table of every weight and bias."""
    shapes: dict[str, tuple[int, ...]] = {}
    k = spec.conv_kernel
    for prefix in STREAMS[spec.kind]:
        channels = 1
        for i, filters in enumerate(spec.conv_filters, start=1):
            shapes[f"{prefix}.conv{i}.weight"] = (filters, channels, k, k)
            shapes[f"{prefix}.conv{i}.bias"] = (filters,)
            channels = filters
    width = spec.feature_width
    for j, units in enumerate(spec.dense_units, start=1):
        shapes[f"head.dense{j}.weight"] = (width, units)
        shapes[f"head.dense{j}.bias"] = (units,)
        width = units
    return shapes


def parameter_count(spec: NetworkSpec) -> int:
    """Number of trainable scalars."""
    return sum(math.prod(shape) for shape in parameter_shapes(spec).values())


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    return shape[0], shape[1]


def glorot_init(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> Parameters:
    """Glorot-uniform weights and zero biases, drawn in :func:`parameter_shapes` order."""
    params: Parameters = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in, fan_out = _fans(shape)
            params[name] = layers.glorot_uniform(rng, shape, fan_in, fan_out, dtype)
    return params


def head_init(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> Parameters:
    """Fresh Glorot parameters of the classifier head only."""
    params: Parameters = {}
    for name, shape in parameter_shapes(spec).items():
        if not name.startswith("head."):
            continue
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = layers.glorot_uniform(rng, shape, *_fans(shape), dtype)
    return params


def check_parameters(spec: NetworkSpec, params: t.Mapping[str, np.ndarray]) -> None:
    """Raise ``ShapeMismatchError`` unless ``params`` matches ``spec`` exactly."""
    expected = parameter_shapes(spec)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeMismatchError(f"parameter names differ from spec: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(f"{name}: shape {params[name].shape} != {shape}")


@dataclass
class Tape:
    """Caches recorded by a forward pass."""

    streams: list[tuple[str, list[Layer]]] = field(default_factory=list)
    head: list[Layer] = field(default_factory=list)
    probs: np.ndarray | None = None


def _as_batch(x: np.ndarray, spec: NetworkSpec) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeMismatchError(f"expected a (N, H, W) or (N, 1, H, W) batch, got {x.shape}")
    if x.shape[2:] != (spec.input_size_px, spec.input_size_px):
        raise ShapeMismatchError(f"patch size {x.shape[2:]} != network input {spec.input_size_px}")
    return layers.check_finite("input", x)


def _features_forward(params: Parameters, prefix: str, x: np.ndarray, spec: NetworkSpec, tape: list[Layer]) -> np.ndarray:
    last = len(spec.conv_filters)
    for i in range(1, last + 1):
        name = f"{prefix}.conv{i}"
        x, cache = layers.conv2d_forward(x, params[f"{name}.weight"], params[f"{name}.bias"])
        tape.append(Layer(name, "conv", cache))
        x, cache = layers.relu_forward(layers.check_finite(name, x))
        tape.append(Layer(name, "relu", cache))
        if i < last:
            x, cache = layers.maxpool_forward(x, spec.pool_window, spec.pool_stride)
            tape.append(Layer(f"{prefix}.pool{i}", "pool", cache))
    x, cache = layers.gap_forward(x)
    tape.append(Layer(f"{prefix}.gap", "gap", cache))
    return x


def _head_forward(
    params: Parameters,
    features: np.ndarray,
    spec: NetworkSpec,
    training: bool,
    rng: np.random.Generator | None,
    tape: list[Layer],
) -> np.ndarray:
    x = features
    n_dense = len(spec.dense_units)
    for j in range(1, n_dense + 1):
        name = f"head.dense{j}"
        x, cache = layers.dense_forward(x, params[f"{name}.weight"], params[f"{name}.bias"])
        tape.append(Layer(name, "dense", cache))
        layers.check_finite(name, x)
        if j < n_dense:
            x, cache = layers.relu_forward(x)
            tape.append(Layer(name, "relu", cache))
        if j == 1:
            x, cache = layers.dropout_forward(x, spec.dropout_rate, training=training, rng=rng)
            tape.append(Layer(name, "dropout", cache))
    return x


def forward(
    spec: NetworkSpec,
    params: Parameters,
    inputs: np.ndarray | tuple[np.ndarray, np.ndarray],
    *,
    mode: str = "inference",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, Tape]:
    """Run the network and keep the tape for :func:`backward`.

    Args:
        spec: Model layout.
        params: Weights matching ``spec``.
        inputs: A patch batch for the baseline, ``(primary, contralateral)``
            batches for the symmetry model.
        mode: ``"train"`` enables dropout (and needs ``rng``).
        rng: Dropout mask source.

    Returns:
        Class probabilities of shape (N, 2) and the tape.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    streams = STREAMS[spec.kind]
    batches = (inputs,) if spec.kind == "baseline" else tuple(inputs)
    if len(batches) != len(streams):
        raise ShapeMismatchError(f"{spec.kind} network takes {len(streams)} input batch(es)")
    batches = tuple(_as_batch(b, spec) for b in batches)
    if len({b.shape[0] for b in batches}) != 1:
        raise ShapeMismatchError("stream batches differ in length")

    tape = Tape()
    pooled = []
    for prefix, batch in zip(streams, batches):
        stream_tape: list[Layer] = []
        dtype = params[f"{prefix}.conv1.weight"].dtype
        pooled.append(_features_forward(params, prefix, batch.astype(dtype, copy=False), spec, stream_tape))
        tape.streams.append((prefix, stream_tape))
    features = pooled[0] if len(pooled) == 1 else np.concatenate(pooled, axis=1)
    logits = _head_forward(params, features, spec, mode == "train", rng, tape.head)
    probs, _ = layers.softmax_forward(logits)
    tape.probs = layers.check_finite("softmax", probs)
    return probs, tape


def backward(spec: NetworkSpec, tape: Tape, dlogits: np.ndarray) -> Parameters:
    """Gradients of every parameter given the gradient at the logits."""
    grads: Parameters = {}
    grad = dlogits
    for layer in reversed(tape.head):
        if layer.kind == "dense":
            grad, dw, db = layers.dense_backward(grad, layer.cache)
            grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
        elif layer.kind == "relu":
            grad = layers.relu_backward(grad, layer.cache)
        else:
            grad = layers.dropout_backward(grad, layer.cache)
    width = spec.conv_filters[-1]
    for k, (prefix, stream_tape) in enumerate(tape.streams):
        stream_grad = grad[:, k * width : (k + 1) * width]
        for layer in reversed(stream_tape):
            if layer.kind == "gap":
                stream_grad = layers.gap_backward(stream_grad, layer.cache)
            elif layer.kind == "pool":
                stream_grad = layers.maxpool_backward(stream_grad, layer.cache)
            elif layer.kind == "relu":
                stream_grad = layers.relu_backward(stream_grad, layer.cache)
            else:
                stream_grad, dw, db = layers.conv2d_backward(stream_grad, layer.cache)
                grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
    for name, value in grads.items():
        layers.check_finite(f"grad {name}", value)
    return grads


def loss_and_gradients(
    spec: NetworkSpec,
    params: Parameters,
    inputs: np.ndarray | tuple[np.ndarray, np.ndarray],
    labels: np.ndarray,
    *,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> tuple[float, Parameters, np.ndarray]:
    """Mean cross-entropy of a batch, its parameter gradients and the probabilities."""
    probs, tape = forward(spec, params, inputs, mode=mode, rng=rng)
    loss, _ = layers.cross_entropy_forward(probs, labels)
    dlogits = layers.softmax_cross_entropy_backward(probs, labels)
    return loss, backward(spec, tape, dlogits), probs


def baseline_forward(
    params: Parameters,
    patch_batch: np.ndarray,
    mode: str = "inference",
    *,
    spec: NetworkSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Class probabilities of the single-input model."""
    if spec.kind != "baseline":
        raise ValueError("baseline_forward needs a baseline spec")
    return forward(spec, params, patch_batch, mode=mode, rng=rng)[0]


def symmetry_forward(
    params: Parameters,
    pair_batch: tuple[np.ndarray, np.ndarray],
    mode: str = "inference",
    *,
    spec: NetworkSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Class probabilities of the two-stream model for (primary, contralateral) batches."""
    if spec.kind != "symmetry":
        raise ValueError("symmetry_forward needs a symmetry spec")
    return forward(spec, params, pair_batch, mode=mode, rng=rng)[0]


def stream_features(params: Parameters, prefix: str, batch: np.ndarray, spec: NetworkSpec) -> np.ndarray:
    """Pooled feature vectors of one extractor stream."""
    dtype = params[f"{prefix}.conv1.weight"].dtype
    return _features_forward(params, prefix, _as_batch(batch, spec).astype(dtype, copy=False), spec, [])
