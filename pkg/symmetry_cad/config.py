"""Pipeline configuration.

The config file is line oriented::

    # comment
    phantom.n_exams = 200
    phantom.vendor_weights = [0.31, 0.21, 0.48]
    run.out_dir = "runs/desk"

Values are JSON literals. The accepted keys are declared below with
``singer_sdk.typing`` and checked with jsonschema, so a bad file fails with
the dotted key in the message.
"""

from __future__ import annotations

import copy
import json
import logging
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

from jsonschema import Draft7Validator
from singer_sdk import typing as th

from symmetry_cad.exceptions import PhantomConfigError, PipelineConfigError
from symmetry_cad.io import config_hash
from symmetry_cad.nnet.network import NetworkSpec
from symmetry_cad.patches import AugmentConfig
from symmetry_cad.phantom import DEFAULT_VENDOR_WEIGHTS, PhantomConfig
from symmetry_cad.trainer import TrainConfig

logger = logging.getLogger(__name__)

SEEDED_SECTIONS = ("phantom", "patches", "train", "eval")


def _pair(item: th.JSONTypeHelper) -> th.ArrayType:
    return th.ArrayType(item)


PHANTOM = th.ObjectType(
    th.Property("n_exams", th.IntegerType, default=200, description="Exams in the synthetic archive"),
    th.Property("malignant_fraction", th.NumberType, default=0.42),
    th.Property("missing_laterality_fraction", th.NumberType, default=0.183),
    th.Property("vendor_weights", _pair(th.NumberType), default=list(DEFAULT_VENDOR_WEIGHTS)),
    th.Property("image_height_px", th.IntegerType, default=600),
    th.Property("image_width_px", th.IntegerType, default=450),
    th.Property("pixel_spacing_cm", th.NumberType, default=0.02),
    th.Property("mass_count_range", _pair(th.IntegerType), default=[1, 2]),
    th.Property("mass_radius_range_cm", _pair(th.NumberType), default=[0.4, 0.9]),
    th.Property("mass_contrast_range", _pair(th.NumberType), default=[0.15, 0.35]),
    th.Property("irregular_fraction", th.NumberType, default=0.5),
    th.Property("asymmetry_texture_strength", th.NumberType, default=0.1),
    th.Property("repeat_patient_fraction", th.NumberType, default=0.1),
    th.Property("split_ratios", _pair(th.NumberType), default=[0.5, 0.1, 0.4]),
    th.Property("seed", th.IntegerType, required=True, description="Seed of every exam's random streams"),
)

CANDIDATES = th.ObjectType(
    th.Property(
        "threshold",
        th.NumberType,
        nullable=True,
        default=None,
        description="Global likelihood threshold; null tunes it on the validation split",
    ),
    th.Property("max_per_image", th.NumberType, default=25),
    th.Property("min_separation_px", th.NumberType, default=70.0),
    th.Property("radius_range_px", _pair(th.NumberType), default=[12.0, 63.0]),
    th.Property("n_orientations", th.IntegerType, default=16),
    th.Property("line_weight", th.NumberType, default=0.3),
)

PATCHES = th.ObjectType(
    th.Property("patch_size_px", th.IntegerType, default=300),
    th.Property("output_size_px", th.IntegerType, default=381, description="Network input size"),
    th.Property("min_lesion_dist_cm", th.NumberType, default=2.0),
    th.Property("min_inter_dist_cm", th.NumberType, default=1.4),
    th.Property("seed", th.IntegerType, required=True),
)

AUGMENT = th.ObjectType(
    th.Property("blur_sigma_range", _pair(th.NumberType), default=[0.2, 3.0]),
    th.Property("apply_probability", th.NumberType, default=0.5),
    th.Property("scale_range", _pair(th.NumberType), default=[0.88, 1.25]),
    th.Property("translate_range_px", _pair(th.NumberType), default=[-25.0, 25.0]),
    th.Property("rotate_range_deg", _pair(th.NumberType), default=[-30.0, 30.0]),
    th.Property("flip_probability", th.NumberType, default=0.5),
)

NETWORK = th.ObjectType(
    th.Property("conv_filters", _pair(th.IntegerType), default=[16, 32, 32, 64, 64, 128, 128]),
    th.Property("conv_kernel", th.IntegerType, default=3),
    th.Property("pool_window", th.IntegerType, default=3),
    th.Property("pool_stride", th.IntegerType, default=2),
    th.Property("dense_units", _pair(th.IntegerType), default=[300, 300, 2]),
    th.Property("dropout_rate", th.NumberType, default=0.5),
)

TRAIN = th.ObjectType(
    th.Property("baseline_lr", th.NumberType, default=1e-2),
    th.Property("symmetry_lr", th.NumberType, default=1e-3),
    th.Property("momentum", th.NumberType, default=0.9),
    th.Property("decay_divisor", th.NumberType, default=200.0, description="decay = initial_lr / decay_divisor"),
    th.Property("batch_size", th.IntegerType, default=64),
    th.Property("patience_epochs", th.IntegerType, default=20),
    th.Property("max_epochs", th.IntegerType, default=200),
    th.Property("augment", th.BooleanType, default=True),
    th.Property("seed", th.IntegerType, required=True),
)

EVAL = th.ObjectType(
    th.Property("bootstrap_n", th.IntegerType, default=1000),
    th.Property("level", th.NumberType, default=0.95),
    th.Property("seed", th.IntegerType, required=True),
)

RUN = th.ObjectType(
    th.Property("out_dir", th.StringType, default="runs/default", description="Root of every artifact"),
)

SECTIONS: dict[str, th.ObjectType] = {
    "phantom": PHANTOM,
    "candidates": CANDIDATES,
    "patches": PATCHES,
    "augment": AUGMENT,
    "network": NETWORK,
    "train": TRAIN,
    "eval": EVAL,
    "run": RUN,
}


def _closed(schema: dict[str, t.Any]) -> dict[str, t.Any]:
    schema["additionalProperties"] = False
    for sub in schema.get("properties", {}).values():
        if sub.get("type") == "object" or "object" in sub.get("type", []):
            _closed(sub)
    return schema


config_jsonschema = _closed(
    th.PropertiesList(*(th.Property(name, section) for name, section in SECTIONS.items())).to_dict()
)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, t.Any]]:
    """Parse ``section.key = value`` lines into nested mappings.

    Raises:
        PipelineConfigError: For malformed lines, non-literal values and
            repeated keys.
    """
    data: dict[str, dict[str, t.Any]] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep or key.count(".") != 1:
            raise PipelineConfigError(f"{source}:{number}: expected 'section.key = value'", key or None)
        section, name = key.split(".")
        value_text = raw.strip()
        try:
            value = json.loads(value_text)
        except json.JSONDecodeError:
            try:
                value = json.loads(value_text.split(" #", 1)[0].strip())
            except json.JSONDecodeError:
                raise PipelineConfigError(
                    f"{source}:{number}: {key}: {value_text!r} is not a typed literal (quote strings)", key
                ) from None
        if name in data.setdefault(section, {}):
            raise PipelineConfigError(f"{source}:{number}: {key} is set twice", key)
        data[section][name] = value
    return data


def _error_key(error) -> str:
    path = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        missing = error.message.split("'")[1]
        path.append(missing)
    elif error.validator == "additionalProperties":
        extra = error.message.split("'")[1] if "'" in error.message else ""
        if extra:
            path.append(extra)
    return ".".join(path)


def validate_config(data: t.Mapping[str, t.Any]) -> dict[str, dict[str, t.Any]]:
    """Check ``data`` against the schema and fill in defaults.

    Raises:
        PipelineConfigError: Naming the first offending dotted key.
    """
    document = {name: dict(data.get(name, {})) for name in SECTIONS}
    for name in data:
        if name not in SECTIONS:
            raise PipelineConfigError(f"{name}: unknown config section", name)
    errors = sorted(Draft7Validator(config_jsonschema).iter_errors(document), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        key = _error_key(first)
        logger.error("Invalid config", extra={"key": key, "errors": len(errors)})
        raise PipelineConfigError(f"{key}: {first.message}", key)
    for name, section in config_jsonschema["properties"].items():
        for prop, prop_schema in section["properties"].items():
            document[name].setdefault(prop, copy.deepcopy(prop_schema.get("default")))
    return document


@dataclass(frozen=True)
class PipelineConfig:
    """Validated settings of every stage."""

    values: dict[str, dict[str, t.Any]]
    source: str = "<config>"
    hash: str = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "hash", config_hash(self.values))

    def __getitem__(self, section: str) -> dict[str, t.Any]:
        return self.values[section]

    @property
    def out_dir(self) -> Path:
        """Artifact root."""
        return Path(self.values["run"]["out_dir"])

    def phantom(self) -> PhantomConfig:
        """Phantom section as a :class:`PhantomConfig`."""
        section = {k: v for k, v in self.values["phantom"].items() if k != "split_ratios"}
        try:
            return PhantomConfig.from_dict(section)
        except PhantomConfigError as exc:
            raise PipelineConfigError(f"phantom.{exc.field}: {exc}", f"phantom.{exc.field}") from exc

    @property
    def split_ratios(self) -> tuple[float, float, float]:
        return tuple(self.values["phantom"]["split_ratios"])  # type: ignore[return-value]

    def augment(self) -> AugmentConfig:
        """Augmentation ranges at the extraction scale."""
        section = self.values["augment"]
        try:
            return AugmentConfig(
                blur_sigma_range=tuple(section["blur_sigma_range"]),
                apply_probability=section["apply_probability"],
                scale_range=tuple(section["scale_range"]),
                translate_range_px=tuple(section["translate_range_px"]),
                rotate_range_deg=tuple(section["rotate_range_deg"]),
                flip_probability=section["flip_probability"],
                seed=self.values["train"]["seed"],
            )
        except ValueError as exc:
            raise PipelineConfigError(f"augment: {exc}", "augment") from exc

    def network(self, kind: str) -> NetworkSpec:
        """Network layout for ``kind`` sized to the archived patches."""
        section = self.values["network"]
        try:
            return NetworkSpec(
                kind=kind,
                conv_filters=tuple(section["conv_filters"]),
                conv_kernel=section["conv_kernel"],
                pool_window=section["pool_window"],
                pool_stride=section["pool_stride"],
                dense_units=tuple(section["dense_units"]),
                dropout_rate=section["dropout_rate"],
                input_size_px=self.values["patches"]["output_size_px"],
            )
        except ValueError as exc:
            raise PipelineConfigError(f"network: {exc}", "network") from exc

    def train(self, kind: str) -> TrainConfig:
        """Optimizer settings for ``kind``."""
        section = self.values["train"]
        lr = section[f"{kind}_lr"]
        try:
            return TrainConfig(
                initial_lr=lr,
                momentum=section["momentum"],
                decay=lr / section["decay_divisor"],
                batch_size=section["batch_size"],
                patience_epochs=section["patience_epochs"],
                max_epochs=section["max_epochs"],
                augment=section["augment"],
                seed=section["seed"],
            )
        except ValueError as exc:
            raise PipelineConfigError(f"train: {exc}", "train") from exc

    def seed(self, section: str) -> int:
        return int(self.values[section]["seed"])


def load_config(
    path: Path | None = None,
    *,
    text: str | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
) -> PipelineConfig:
    """Read, override, validate and wrap a config.

    Args:
        path: Config file; ``text`` is used instead when given.
        text: Config text.
        seed: Replaces the seed of every stochastic section.
        out_dir: Replaces ``run.out_dir``.
    """
    source = str(path) if path is not None else "<config>"
    if text is None:
        if path is None:
            raise PipelineConfigError("no config given", None)
        text = Path(path).read_text(encoding="utf-8")
    data = parse_config_text(text, source)
    if seed is not None:
        for section in SEEDED_SECTIONS:
            data.setdefault(section, {})["seed"] = int(seed)
    if out_dir is not None:
        data.setdefault("run", {})["out_dir"] = str(out_dir)
    config = PipelineConfig(validate_config(data), source)
    config.phantom()
    config.augment()
    config.network("baseline")
    config.train("baseline")
    logger.debug("Loaded config %s (%s)", source, config.hash[:12])
    return config


def render_config(values: t.Mapping[str, t.Mapping[str, t.Any]]) -> str:
    """Inverse of :func:`parse_config_text` (sorted keys)."""
    lines = []
    for section in sorted(values):
        for key in sorted(values[section]):
            lines.append(f"{section}.{key} = {json.dumps(values[section][key])}")
    return "\n".join(lines) + "\n"


def set_config_value(path: Path, key: str, value: t.Any) -> None:
    """Rewrite the ``key`` line of a config file in place, appending it when absent.

    Other lines, comments included, are kept as written.

    Raises:
        PipelineConfigError: If ``key`` is not a ``section.key`` name.
    """
    if key.count(".") != 1:
        raise PipelineConfigError(f"{key}: expected 'section.key'", key)
    path = Path(path)
    line = f"{key} = {json.dumps(value)}"
    lines = path.read_text(encoding="utf-8").splitlines()
    for i, existing in enumerate(lines):
        stripped = existing.strip()
        if not stripped.startswith("#") and stripped.partition("=")[0].strip() == key:
            lines[i] = line
            break
    else:
        lines.append(line)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Set %s in %s", key, path, extra={"value": value})
