"""Synthetic bilateral mammography exams.

The phantom replaces a clinical archive: every exam holds up to four views
(MLO and CC of both breasts), a vendor tag, and ground-truth masses. Left
and right breasts of one exam share their low-frequency tissue texture so a
model comparing a patch with its contra-lateral mirror has real symmetry to
exploit. All randomness derives from ``(config.seed, exam index)`` so any
exam can be re-rendered in isolation.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy import ndimage

from symmetry_cad.exceptions import (
    InsufficientDataError,
    NonFiniteError,
    PhantomConfigError,
    SchemaVersionError,
)

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1

VENDORS = ("GE", "Siemens", "Hologic")
LATERALITIES = ("left", "right")
VIEWS = ("MLO", "CC")
SHAPES = ("oval", "irregular")

# Vendor tags only change the global intensity response.
VENDOR_GAMMA = {"GE": 1.0, "Siemens": 0.92, "Hologic": 1.08}

# Study counts per vendor in the source archive (GE, Siemens, Hologic).
_ARCHIVE_STUDIES = (2248, 1518, 3430)
DEFAULT_VENDOR_WEIGHTS = tuple(n / sum(_ARCHIVE_STUDIES) for n in _ARCHIVE_STUDIES)

TISSUE_LEVEL = 0.45
TEXTURE_AMPLITUDE = 0.07
TEXTURE_SIGMA_PX = 14.0
FINE_TEXTURE_AMPLITUDE = 0.015
FINE_TEXTURE_SIGMA_PX = 3.0
SKIN_FALLOFF = 0.08

# Semi-axes of the breast outline as fractions of (height, width).
_BREAST_AXES = {"MLO": (0.46, 0.88), "CC": (0.40, 0.78)}

# Seed-sequence stream ids below the exam index.
_STREAM_LAYOUT = 0
_STREAM_TISSUE = {"MLO": 1, "CC": 2}
_STREAM_ASYMMETRY = {
    ("left", "MLO"): 3,
    ("left", "CC"): 4,
    ("right", "MLO"): 5,
    ("right", "CC"): 6,
}


@dataclass(frozen=True)
class PhantomConfig:
    """Parameters of the synthetic archive.

    Defaults follow the source archive: 42% malignant exams, 18.3% of exams
    missing one breast, and the per-vendor study mix.
    """

    n_exams: int = 200
    malignant_fraction: float = 0.42
    missing_laterality_fraction: float = 0.183
    vendor_weights: tuple[float, float, float] = DEFAULT_VENDOR_WEIGHTS
    image_height_px: int = 600
    image_width_px: int = 450
    pixel_spacing_cm: float = 0.02
    mass_count_range: tuple[int, int] = (1, 2)
    mass_radius_range_cm: tuple[float, float] = (0.4, 0.9)
    mass_contrast_range: tuple[float, float] = (0.15, 0.35)
    irregular_fraction: float = 0.5
    asymmetry_texture_strength: float = 0.1
    repeat_patient_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate every field, naming the offending one."""
        if self.n_exams < 1:
            raise PhantomConfigError("n_exams", "must be at least 1")
        for name in (
            "malignant_fraction",
            "missing_laterality_fraction",
            "irregular_fraction",
            "repeat_patient_fraction",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise PhantomConfigError(name, f"ratio {value} outside [0, 1]")
        weights = tuple(float(w) for w in self.vendor_weights)
        if len(weights) != len(VENDORS):
            raise PhantomConfigError("vendor_weights", "expected 3 ratios")
        if any(not 0.0 <= w <= 1.0 for w in weights):
            raise PhantomConfigError("vendor_weights", "ratios must lie in [0, 1]")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise PhantomConfigError("vendor_weights", f"sum {sum(weights)} != 1")
        if self.image_height_px < 16 or self.image_width_px < 16:
            raise PhantomConfigError("image_height_px", "image must be at least 16x16")
        if not self.pixel_spacing_cm > 0:
            raise PhantomConfigError("pixel_spacing_cm", "must be positive")
        lo, hi = self.mass_count_range
        if lo < 1 or hi < lo:
            raise PhantomConfigError("mass_count_range", f"bad interval {lo}..{hi}")
        rlo, rhi = self.mass_radius_range_cm
        if not 0 < rlo <= rhi:
            raise PhantomConfigError("mass_radius_range_cm", f"bad interval {rlo}..{rhi}")
        if 2.2 * rhi / self.pixel_spacing_cm > 0.8 * min(self.image_height_px, self.image_width_px):
            raise PhantomConfigError("mass_radius_range_cm", "masses do not fit the image")
        clo, chi = self.mass_contrast_range
        if not 0 <= clo <= chi:
            raise PhantomConfigError("mass_contrast_range", f"bad interval {clo}..{chi}")
        if self.asymmetry_texture_strength < 0:
            raise PhantomConfigError("asymmetry_texture_strength", "must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise PhantomConfigError("seed", "must be a 64-bit unsigned integer")

    @property
    def shape(self) -> tuple[int, int]:
        """Image shape as (rows, cols)."""
        return (self.image_height_px, self.image_width_px)

    @classmethod
    def from_dict(cls, data: t.Mapping[str, t.Any]) -> PhantomConfig:
        """Build a config from a (JSON) mapping, ignoring unknown keys."""
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in names}
        for key in ("vendor_weights", "mass_count_range", "mass_radius_range_cm", "mass_contrast_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def to_dict(self) -> dict[str, t.Any]:
        """Return a JSON-ready mapping."""
        data = dataclasses.asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data


@dataclass(frozen=True)
class Lesion:
    """A mass: a star-shaped region around ``center_rc``.

    ``radius_px`` is the equivalent-circle radius of the oval; irregular masses
    modulate the oval boundary with low-order radial harmonics, each stored as
    ``(order, amplitude, phase)``.
    """

    lesion_id: str
    center_rc: tuple[int, int]
    radius_px: float
    shape: str = "oval"
    contrast: float = 0.3
    axis_ratio: float = 1.0
    orientation_rad: float = 0.0
    harmonics: tuple[tuple[int, float, float], ...] = ()

    def __post_init__(self) -> None:
        if not self.radius_px > 0:
            raise PhantomConfigError("radius_px", "must be positive")
        if self.shape not in SHAPES:
            raise PhantomConfigError("shape", f"unknown shape {self.shape!r}")
        if self.contrast < 0:
            raise PhantomConfigError("contrast", "must be >= 0")

    def boundary_radius(self, angle: np.ndarray) -> np.ndarray:
        """Boundary distance from the center along ``angle`` (atan2(dr, dc))."""
        rel = angle - self.orientation_rad
        major = self.radius_px * math.sqrt(self.axis_ratio)
        minor = self.radius_px / math.sqrt(self.axis_ratio)
        rho = major * minor / np.sqrt((minor * np.cos(rel)) ** 2 + (major * np.sin(rel)) ** 2)
        if self.harmonics:
            modulation = np.ones_like(rel)
            for order, amplitude, phase in self.harmonics:
                modulation = modulation + amplitude * np.cos(order * rel + phase)
            rho = rho * modulation
        return rho

    @property
    def max_extent_px(self) -> float:
        """Upper bound of the boundary distance."""
        bump = 1.0 + sum(abs(a) for _, a, _ in self.harmonics)
        return self.radius_px * math.sqrt(self.axis_ratio) * bump

    def normalized_distance(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Distance to the center divided by the boundary distance (<= 1 inside)."""
        dr = rows - self.center_rc[0]
        dc = cols - self.center_rc[1]
        dist = np.hypot(dr, dc)
        return dist / self.boundary_radius(np.arctan2(dr, dc))

    def contains(self, row: float, col: float) -> bool:
        """Whether pixel ``(row, col)`` lies inside the lesion support."""
        value = self.normalized_distance(np.asarray(float(row)), np.asarray(float(col)))
        return bool(value <= 1.0)

    def support_mask(self, shape: tuple[int, int]) -> np.ndarray:
        """Boolean mask of the lesion support on an image of ``shape``."""
        rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]]
        return self.normalized_distance(rows, cols) <= 1.0

    def mirrored(self, width: int) -> Lesion:
        """The same lesion after a horizontal flip of an image ``width`` wide."""
        row, col = self.center_rc
        return dataclasses.replace(
            self,
            center_rc=(row, width - 1 - col),
            orientation_rad=math.pi - self.orientation_rad,
            harmonics=tuple((m, a, -p) for m, a, p in self.harmonics),
        )

    def to_dict(self) -> dict[str, t.Any]:
        """Return a JSON-ready mapping."""
        return {
            "lesion_id": self.lesion_id,
            "center_rc": list(self.center_rc),
            "radius_px": self.radius_px,
            "shape": self.shape,
            "contrast": self.contrast,
            "axis_ratio": self.axis_ratio,
            "orientation_rad": self.orientation_rad,
            "harmonics": [list(h) for h in self.harmonics],
        }

    @classmethod
    def from_dict(cls, data: t.Mapping[str, t.Any]) -> Lesion:
        """Inverse of :meth:`to_dict`."""
        return cls(
            lesion_id=data["lesion_id"],
            center_rc=(int(data["center_rc"][0]), int(data["center_rc"][1])),
            radius_px=float(data["radius_px"]),
            shape=data["shape"],
            contrast=float(data["contrast"]),
            axis_ratio=float(data.get("axis_ratio", 1.0)),
            orientation_rad=float(data.get("orientation_rad", 0.0)),
            harmonics=tuple((int(m), float(a), float(p)) for m, a, p in data.get("harmonics", [])),
        )


@dataclass(frozen=True, eq=False)
class BreastImage:
    """One rendered view: an intensity raster in [0, 1] plus its ground truth."""

    pixels: np.ndarray
    laterality: str
    view: str
    pixel_spacing_cm: float
    lesions: tuple[Lesion, ...] = ()
    image_id: str = ""
    exam_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        """Raster shape as (rows, cols)."""
        return self.pixels.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class ImageRecord:
    """Manifest entry of one view."""

    image_id: str
    laterality: str
    view: str
    lesions: tuple[Lesion, ...] = ()
    path: str | None = None

    def to_dict(self) -> dict[str, t.Any]:
        """Return a JSON-ready mapping."""
        return {
            "image_id": self.image_id,
            "laterality": self.laterality,
            "view": self.view,
            "path": self.path,
            "lesions": [lesion.to_dict() for lesion in self.lesions],
        }

    @classmethod
    def from_dict(cls, data: t.Mapping[str, t.Any]) -> ImageRecord:
        """Inverse of :meth:`to_dict`."""
        return cls(
            image_id=data["image_id"],
            laterality=data["laterality"],
            view=data["view"],
            path=data.get("path"),
            lesions=tuple(Lesion.from_dict(d) for d in data.get("lesions", [])),
        )


@dataclass(frozen=True)
class Exam:
    """One screening exam of one patient."""

    exam_id: str
    patient_id: str
    index: int
    vendor: str
    label: str
    images: tuple[ImageRecord, ...]
    missing_laterality: str | None = None
    split: str | None = None

    def __post_init__(self) -> None:
        keys = [(img.laterality, img.view) for img in self.images]
        if len(keys) != len(set(keys)):
            raise PhantomConfigError("images", f"{self.exam_id}: duplicate (laterality, view)")
        has_lesion = any(img.lesions for img in self.images)
        if (self.label == "malignant") != has_lesion:
            raise PhantomConfigError("label", f"{self.exam_id}: label disagrees with lesions")

    def image(self, laterality: str, view: str) -> ImageRecord | None:
        """The view of one breast, or ``None`` if it is missing."""
        for img in self.images:
            if img.laterality == laterality and img.view == view:
                return img
        return None

    def contralateral(self, record: ImageRecord) -> ImageRecord | None:
        """Same view of the opposite breast."""
        other = "right" if record.laterality == "left" else "left"
        return self.image(other, record.view)

    def to_dict(self) -> dict[str, t.Any]:
        """Return a JSON-ready mapping."""
        return {
            "exam_id": self.exam_id,
            "patient_id": self.patient_id,
            "index": self.index,
            "vendor": self.vendor,
            "label": self.label,
            "missing_laterality": self.missing_laterality,
            "split": self.split,
            "images": [img.to_dict() for img in self.images],
        }

    @classmethod
    def from_dict(cls, data: t.Mapping[str, t.Any]) -> Exam:
        """Inverse of :meth:`to_dict`."""
        return cls(
            exam_id=data["exam_id"],
            patient_id=data["patient_id"],
            index=int(data["index"]),
            vendor=data["vendor"],
            label=data["label"],
            missing_laterality=data.get("missing_laterality"),
            split=data.get("split"),
            images=tuple(ImageRecord.from_dict(d) for d in data["images"]),
        )


@dataclass(frozen=True)
class DatasetManifest:
    """The archive description: config plus every exam and its ground truth."""

    config: PhantomConfig
    exams: tuple[Exam, ...]
    provenance: dict[str, t.Any] = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.exams)

    def iter_images(self) -> t.Iterator[tuple[Exam, ImageRecord]]:
        """Yield every (exam, image) pair in manifest order."""
        for exam in self.exams:
            for record in exam.images:
                yield exam, record

    def subset(self, exams: t.Iterable[Exam]) -> DatasetManifest:
        """A manifest over ``exams`` sharing this manifest's config."""
        return DatasetManifest(self.config, tuple(exams), dict(self.provenance))

    def to_dict(self) -> dict[str, t.Any]:
        """Return a JSON-ready mapping."""
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "provenance": self.provenance,
            "config": self.config.to_dict(),
            "exams": [exam.to_dict() for exam in self.exams],
        }

    def to_json(self) -> str:
        """Deterministic JSON document of the manifest."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: t.Mapping[str, t.Any], source: str = "<manifest>") -> DatasetManifest:
        """Inverse of :meth:`to_dict`; checks the schema version."""
        if data.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise SchemaVersionError(source, data.get("schema_version"), MANIFEST_SCHEMA_VERSION)
        return cls(
            config=PhantomConfig.from_dict(data["config"]),
            exams=tuple(Exam.from_dict(d) for d in data["exams"]),
            provenance=dict(data.get("provenance", {})),
        )


def _stream(seed: int, exam_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(exam_index, stream)))


def _largest_remainder(weights: t.Sequence[float], total: int) -> list[int]:
    raw = [w * total for w in weights]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def breast_mask(shape: tuple[int, int], view: str, laterality: str = "left") -> np.ndarray:
    """Normalized elliptic radius of the breast outline (<= 1 inside).

    The left breast has its chest wall on column 0; right breasts are mirrored.
    """
    height, width = shape
    axis_r, axis_c = _BREAST_AXES[view]
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    q = np.sqrt(((rows - (height - 1) / 2.0) / (axis_r * height)) ** 2 + (cols / (axis_c * width)) ** 2)
    if laterality == "right":
        q = np.fliplr(q)
    return q


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    std = noise.std()
    return noise / std if std > 0 else noise


def _lesion_profile(normalized: np.ndarray) -> np.ndarray:
    """Flat top up to 0.7 of the boundary, smoothstep down to zero at it."""
    x = np.clip((1.0 - normalized) / 0.3, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def render_breast(
    rng: np.random.Generator,
    vendor_tag: str,
    lesions: t.Sequence[Lesion],
    *,
    laterality: str = "left",
    view: str = "MLO",
    config: PhantomConfig | None = None,
    asymmetry_rng: np.random.Generator | None = None,
    image_id: str = "",
    exam_id: str = "",
) -> BreastImage:
    """Render one view.

    Tissue texture is drawn from ``rng`` in the left-breast orientation and
    mirrored for right breasts, so two calls with identical ``rng`` streams
    produce mirror images. A laterality-specific perturbation scaled by
    ``config.asymmetry_texture_strength`` is drawn from ``asymmetry_rng``.
    Lesions are given in the final (mirrored) coordinates.

    Args:
        rng: Tissue texture stream; share it between the two breasts of an exam.
        vendor_tag: One of :data:`VENDORS`; selects the intensity gamma.
        lesions: Masses to insert.
        laterality: ``"left"`` or ``"right"``.
        view: ``"MLO"`` or ``"CC"``.
        config: Phantom parameters (image size, spacing, asymmetry strength).
        asymmetry_rng: Stream for the laterality-specific perturbation.
        image_id: Identifier stored on the result.
        exam_id: Identifier stored on the result.

    Returns:
        The rendered view with intensities in [0, 1].
    """
    config = config or PhantomConfig()
    shape = config.shape
    if vendor_tag not in VENDOR_GAMMA:
        raise PhantomConfigError("vendor", f"unknown vendor {vendor_tag!r}")
    for lesion in lesions:
        row, col = lesion.center_rc
        if not (0 <= row < shape[0] and 0 <= col < shape[1]):
            raise PhantomConfigError("lesions", f"{lesion.lesion_id} centered outside the image")

    q = breast_mask(shape, view)
    x = np.clip((1.0 - q) / SKIN_FALLOFF, 0.0, 1.0)
    thickness = x * x * (3.0 - 2.0 * x)
    texture = TEXTURE_AMPLITUDE * _smooth_field(rng, shape, TEXTURE_SIGMA_PX)
    texture += FINE_TEXTURE_AMPLITUDE * _smooth_field(rng, shape, FINE_TEXTURE_SIGMA_PX)
    if config.asymmetry_texture_strength > 0:
        perturbation = _smooth_field(asymmetry_rng or rng, shape, TEXTURE_SIGMA_PX)
        texture += config.asymmetry_texture_strength * TEXTURE_AMPLITUDE * perturbation
    pixels = thickness * (TISSUE_LEVEL + texture)
    if laterality == "right":
        pixels = np.fliplr(pixels)

    if lesions:
        rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
        for lesion in lesions:
            extent = lesion.max_extent_px + 1
            r0, c0 = lesion.center_rc
            rs = slice(max(0, int(r0 - extent)), min(shape[0], int(r0 + extent) + 1))
            cs = slice(max(0, int(c0 - extent)), min(shape[1], int(c0 + extent) + 1))
            normalized = lesion.normalized_distance(rows[rs, cs], cols[rs, cs])
            pixels[rs, cs] = pixels[rs, cs] + lesion.contrast * _lesion_profile(normalized)

    pixels = np.clip(pixels, 0.0, 1.0) ** VENDOR_GAMMA[vendor_tag]
    if not np.all(np.isfinite(pixels)):
        raise NonFiniteError("render_breast")
    return BreastImage(
        pixels=np.ascontiguousarray(pixels),
        laterality=laterality,
        view=view,
        pixel_spacing_cm=config.pixel_spacing_cm,
        lesions=tuple(lesions),
        image_id=image_id,
        exam_id=exam_id,
    )


def _image_id(exam_id: str, laterality: str, view: str) -> str:
    return f"{exam_id}_{laterality[0].upper()}_{view}"


def _place_lesion(
    rng: np.random.Generator,
    config: PhantomConfig,
    view: str,
    laterality: str,
    template: Lesion,
    taken: list[Lesion],
) -> Lesion:
    shape = config.shape
    q = breast_mask(shape, view, laterality)
    margin = template.max_extent_px + 10.0
    axis_r, axis_c = _BREAST_AXES[view]
    q_limit = 1.0 - margin / min(axis_r * shape[0], axis_c * shape[1])
    for _ in range(2000):
        row = int(rng.integers(0, shape[0]))
        col = int(rng.integers(0, shape[1]))
        wall_distance = col if laterality == "left" else shape[1] - 1 - col
        if q[row, col] > q_limit or wall_distance < margin:
            continue
        if any(
            math.hypot(row - o.center_rc[0], col - o.center_rc[1]) < margin + o.max_extent_px
            for o in taken
        ):
            continue
        return dataclasses.replace(template, center_rc=(row, col))
    raise PhantomConfigError("mass_radius_range_cm", "could not place mass inside the breast")


def _lesion_template(rng: np.random.Generator, config: PhantomConfig, lesion_id: str) -> Lesion:
    radius_px = rng.uniform(*config.mass_radius_range_cm) / config.pixel_spacing_cm
    irregular = bool(rng.random() < config.irregular_fraction)
    harmonics: tuple[tuple[int, float, float], ...] = ()
    if irregular:
        harmonics = tuple(
            (order, float(rng.uniform(0.04, 0.10)), float(rng.uniform(0.0, 2 * math.pi))) for order in (3, 5)
        )
    return Lesion(
        lesion_id=lesion_id,
        center_rc=(0, 0),
        radius_px=float(radius_px),
        shape="irregular" if irregular else "oval",
        contrast=float(rng.uniform(*config.mass_contrast_range)),
        axis_ratio=float(rng.uniform(1.0, 1.6)),
        orientation_rad=float(rng.uniform(0.0, math.pi)),
        harmonics=harmonics,
    )


def _build_exam(
    config: PhantomConfig,
    index: int,
    patient_id: str,
    vendor: str,
    malignant: bool,
    missing: str | None,
) -> Exam:
    exam_id = f"E{index:05d}"
    rng = _stream(config.seed, index, _STREAM_LAYOUT)
    present = [lat for lat in LATERALITIES if lat != missing]
    lesions: dict[tuple[str, str], list[Lesion]] = {(lat, view): [] for lat in present for view in VIEWS}
    if malignant:
        side = present[int(rng.integers(0, len(present)))]
        lo, hi = config.mass_count_range
        for k in range(int(rng.integers(lo, hi + 1))):
            template = _lesion_template(rng, config, f"{exam_id}_M{k}")
            # One physical mass, seen in both views of the affected breast.
            for view in VIEWS:
                placed = _place_lesion(rng, config, view, side, template, lesions[(side, view)])
                lesions[(side, view)].append(placed)
    images = tuple(
        ImageRecord(
            image_id=_image_id(exam_id, lat, view),
            laterality=lat,
            view=view,
            lesions=tuple(lesions[(lat, view)]),
        )
        for lat in present
        for view in VIEWS
    )
    return Exam(
        exam_id=exam_id,
        patient_id=patient_id,
        index=index,
        vendor=vendor,
        label="malignant" if malignant else "normal",
        images=images,
        missing_laterality=missing,
    )


def generate_dataset(config: PhantomConfig) -> DatasetManifest:
    """Draw the archive layout: patients, vendors, labels, lesion geometry.

    Counts of malignant and missing-laterality exams are the rounded
    configured fractions, so realized fractions match exactly up to rounding.
    Pixels are not rendered here; see :func:`render_exam`.

    Args:
        config: Validated phantom parameters.

    Returns:
        The manifest, deterministic in ``config``.
    """
    n = config.n_exams
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2**31,)))

    malignant = np.zeros(n, dtype=bool)
    malignant[rng.permutation(n)[: int(round(config.malignant_fraction * n))]] = True

    missing: list[str | None] = [None] * n
    for i in rng.permutation(n)[: int(round(config.missing_laterality_fraction * n))]:
        missing[int(i)] = LATERALITIES[int(rng.integers(0, 2))]

    vendor_of = np.empty(n, dtype=object)
    order = rng.permutation(n)
    start = 0
    for vendor, count in zip(VENDORS, _largest_remainder(config.vendor_weights, n)):
        vendor_of[order[start : start + count]] = vendor
        start += count

    # Some patients contribute two exams; both come from the same vendor.
    patient_of = [""] * n
    next_patient = 0
    for vendor in VENDORS:
        members = [int(i) for i in rng.permutation(np.flatnonzero(vendor_of == vendor))]
        n_pairs = int(len(members) * config.repeat_patient_fraction / (1.0 + config.repeat_patient_fraction))
        pairs = [members[2 * k : 2 * k + 2] for k in range(n_pairs)]
        singles = [[i] for i in members[2 * n_pairs :]]
        for group in pairs + singles:
            for i in group:
                patient_of[i] = f"P{next_patient:05d}"
            next_patient += 1

    exams = tuple(
        _build_exam(config, i, patient_of[i], str(vendor_of[i]), bool(malignant[i]), missing[i]) for i in range(n)
    )
    logger.info(
        "Generated phantom layout",
        extra={"n_exams": n, "malignant": int(malignant.sum()), "patients": next_patient},
    )
    return DatasetManifest(config=config, exams=exams)


def render_exam(config: PhantomConfig, exam: Exam) -> dict[str, BreastImage]:
    """Render every view of ``exam`` from its seed streams."""
    rendered: dict[str, BreastImage] = {}
    for record in exam.images:
        tissue = _stream(config.seed, exam.index, _STREAM_TISSUE[record.view])
        asymmetry = _stream(config.seed, exam.index, _STREAM_ASYMMETRY[(record.laterality, record.view)])
        rendered[record.image_id] = render_breast(
            tissue,
            exam.vendor,
            record.lesions,
            laterality=record.laterality,
            view=record.view,
            config=config,
            asymmetry_rng=asymmetry,
            image_id=record.image_id,
            exam_id=exam.exam_id,
        )
    return rendered


def split_dataset(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = (0.5, 0.1, 0.4),
    seed: int = 0,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Patient-level train/validation/test split, stratified by vendor.

    Args:
        manifest: Archive to split.
        ratios: Fractions of patients for (train, validation, test).
        seed: Shuffling seed.

    Returns:
        Three manifests whose exams carry their ``split`` tag.

    Raises:
        InsufficientDataError: If there are fewer than three patients.
        PhantomConfigError: If the ratios are not positive or do not sum to 1.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise PhantomConfigError("ratios", "three positive ratios required")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise PhantomConfigError("ratios", f"sum {sum(ratios)} != 1")

    patients: dict[str, list[Exam]] = {}
    for exam in manifest.exams:
        patients.setdefault(exam.patient_id, []).append(exam)
    if len(patients) < 3:
        raise InsufficientDataError(f"need at least 3 patients to split, got {len(patients)}")

    rng = np.random.default_rng(seed)
    names = ("train", "val", "test")
    assignment: dict[str, str] = {}
    for vendor in VENDORS:
        ids = sorted(pid for pid, exams in patients.items() if exams[0].vendor == vendor)
        shuffled = [ids[int(i)] for i in rng.permutation(len(ids))]
        start = 0
        for name, count in zip(names, _largest_remainder(ratios, len(shuffled))):
            for pid in shuffled[start : start + count]:
                assignment[pid] = name
            start += count

    parts: dict[str, list[Exam]] = {name: [] for name in names}
    for exam in manifest.exams:
        name = assignment[exam.patient_id]
        parts[name].append(dataclasses.replace(exam, split=name))
    logger.info("Split dataset", extra={name: len(parts[name]) for name in names})
    return tuple(manifest.subset(parts[name]) for name in names)  # type: ignore[return-value]


def assign_splits(manifest: DatasetManifest, *splits: DatasetManifest) -> DatasetManifest:
    """Fold split tags back into one manifest, preserving exam order."""
    tags = {exam.exam_id: exam.split for part in splits for exam in part.exams}
    return manifest.subset(dataclasses.replace(e, split=tags.get(e.exam_id)) for e in manifest.exams)


def by_split(manifest: DatasetManifest, name: str) -> DatasetManifest:
    """Exams tagged with split ``name``."""
    return manifest.subset(e for e in manifest.exams if e.split == name)


def dataset_table(manifest: DatasetManifest) -> dict[str, dict[str, int]]:
    """Per-vendor studies, normal images and images with malignant lesions."""
    table = {v: {"studies": 0, "normal_images": 0, "malignant_images": 0} for v in VENDORS}
    for exam in manifest.exams:
        row = table[exam.vendor]
        row["studies"] += 1
        for record in exam.images:
            row["malignant_images" if record.lesions else "normal_images"] += 1
    return table


def write_pgm(path: Path, pixels: np.ndarray, comment: str = "") -> None:
    """Write a [0, 1] raster as 16-bit binary PGM (big-endian samples)."""
    height, width = pixels.shape
    data = np.round(np.clip(pixels, 0.0, 1.0) * 65535.0).astype(">u2")
    header = "P5\n"
    if comment:
        header += "".join(f"# {line}\n" for line in comment.splitlines())
    header += f"{width} {height}\n65535\n"
    with Path(path).open("wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm` into a float [0, 1] raster."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the samples
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = (int(tok) for tok in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.float64) / float(maxval)


def write_dataset(
    manifest: DatasetManifest,
    out_dir: Path,
    *,
    threads: int = 1,
) -> DatasetManifest:
    """Render every exam to ``out_dir/images`` and write ``manifest.json``.

    Returns:
        The manifest with image paths (relative to ``out_dir``) filled in.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    comment = " ".join(f"{k}={v}" for k, v in sorted(manifest.provenance.items()))

    def _write(exam: Exam) -> Exam:
        rendered = render_exam(manifest.config, exam)
        records = []
        for record in exam.images:
            rel = f"images/{record.image_id}.pgm"
            write_pgm(out_dir / rel, rendered[record.image_id].pixels, comment)
            records.append(dataclasses.replace(record, path=rel))
        logger.debug("Rendered exam %s", exam.exam_id)
        return dataclasses.replace(exam, images=tuple(records))

    exams = Parallel(n_jobs=threads, prefer="threads")(delayed(_write)(exam) for exam in manifest.exams)
    written = manifest.subset(exams)
    (out_dir / "manifest.json").write_text(written.to_json(), encoding="utf-8")
    logger.info("Wrote dataset", extra={"path": str(out_dir), "n_exams": len(written)})
    return written


def load_manifest(path: Path) -> DatasetManifest:
    """Read a ``manifest.json`` written by :func:`write_dataset`."""
    path = Path(path)
    return DatasetManifest.from_dict(json.loads(path.read_text(encoding="utf-8")), source=str(path))


def load_image(root: Path, exam: Exam, record: ImageRecord, config: PhantomConfig) -> BreastImage:
    """Load one view from disk, falling back to re-rendering when no path is recorded."""
    if record.path is None:
        return render_exam(config, exam)[record.image_id]
    pixels = read_pgm(Path(root) / record.path)
    return BreastImage(
        pixels=pixels,
        laterality=record.laterality,
        view=record.view,
        pixel_spacing_cm=config.pixel_spacing_cm,
        lesions=record.lesions,
        image_id=record.image_id,
        exam_id=exam.exam_id,
    )


__all__ = [
    "BreastImage",
    "DatasetManifest",
    "Exam",
    "ImageRecord",
    "Lesion",
    "PhantomConfig",
    "generate_dataset",
    "load_manifest",
    "render_breast",
    "render_exam",
    "split_dataset",
    "write_dataset",
]
