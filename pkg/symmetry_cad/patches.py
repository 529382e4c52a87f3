"""Symmetric patch pairs.

A pair is the patch around a candidate in its own (primary) view plus the
patch at the same location in the horizontally flipped contra-lateral view.
When the opposite breast was not imaged, the contra-lateral patch is zeros.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy import ndimage
from skimage import transform

from symmetry_cad.candidates import frame_to_candidates
from symmetry_cad.exceptions import InsufficientDataError, SchemaVersionError, ShapeMismatchError

if t.TYPE_CHECKING:
    import pandas as pd

    from symmetry_cad.candidates import Candidate
    from symmetry_cad.phantom import BreastImage, DatasetManifest, Exam, ImageRecord, Lesion

logger = logging.getLogger(__name__)

ARCHIVE_SCHEMA_VERSION = 1
_MAGIC = b"SCADPTCH"
_HEADER = np.dtype([("magic", "S8"), ("version", "<u4"), ("count", "<u4"), ("size", "<u4"), ("dtype", "S4")])


@dataclass(frozen=True, eq=False)
class PatchPair:
    """Primary and contra-lateral patches around one candidate.

    A missing contra-lateral view always gives an all-zero partner. The
    converse does not hold: background outside the breast is exactly zero,
    so a present partner can also be all zero (a patch over air, or one
    shifted off the tissue by augmentation). ``has_contralateral`` is the
    only record of a missing view.
    """

    primary: np.ndarray
    contralateral: np.ndarray
    label: str
    has_contralateral: bool
    provenance: tuple[str, str, tuple[int, int]] = ("", "", (0, 0))

    def __post_init__(self) -> None:
        if self.primary.shape != self.contralateral.shape:
            raise ShapeMismatchError(
                f"patch shapes differ: {self.primary.shape} vs {self.contralateral.shape}"
            )
        if not self.has_contralateral and np.any(self.contralateral):
            raise ShapeMismatchError("contralateral patch must be zero when the image is missing")


@dataclass(frozen=True)
class AugmentConfig:
    """Online augmentation ranges (pixel quantities at the 300 px patch scale)."""

    blur_sigma_range: tuple[float, float] = (0.2, 3.0)
    apply_probability: float = 0.5
    scale_range: tuple[float, float] = (0.88, 1.25)
    translate_range_px: tuple[float, float] = (-25.0, 25.0)
    rotate_range_deg: tuple[float, float] = (-30.0, 30.0)
    flip_probability: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("apply_probability", "flip_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("blur_sigma_range", "scale_range", "translate_range_px", "rotate_range_deg"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.blur_sigma_range[0] <= 0 or self.scale_range[0] <= 0:
            raise ValueError("blur sigma and scale must be positive")

    def rescaled(self, factor: float) -> AugmentConfig:
        """Copy with pixel-valued ranges multiplied by ``factor`` (after resampling)."""
        return dataclasses.replace(
            self,
            blur_sigma_range=tuple(factor * v for v in self.blur_sigma_range),  # type: ignore[arg-type]
            translate_range_px=tuple(factor * v for v in self.translate_range_px),  # type: ignore[arg-type]
        )


def mirror_contralateral(image: BreastImage) -> BreastImage:
    """Flip a view horizontally, remapping lesion coordinates: (r, c) -> (r, W-1-c)."""
    width = image.pixels.shape[1]
    return dataclasses.replace(
        image,
        pixels=np.ascontiguousarray(image.pixels[:, ::-1]),
        lesions=tuple(lesion.mirrored(width) for lesion in image.lesions),
    )


def extract_patch(image: BreastImage | np.ndarray, center_rc: tuple[int, int], size_px: int = 300) -> np.ndarray:
    """Window of ``size_px`` x ``size_px`` centered on ``center_rc``, zero outside the image.

    For even sizes the center sits at index ``size_px // 2`` of the window.
    """
    pixels = np.asarray(getattr(image, "pixels", image))
    height, width = pixels.shape
    row, col = int(center_rc[0]), int(center_rc[1])
    if not (0 <= row < height and 0 <= col < width):
        raise ValueError(f"center {center_rc} outside image of shape {pixels.shape}")
    top, left = row - size_px // 2, col - size_px // 2
    patch = np.zeros((size_px, size_px), dtype=pixels.dtype)
    r0, r1 = max(top, 0), min(top + size_px, height)
    c0, c1 = max(left, 0), min(left + size_px, width)
    patch[r0 - top : r1 - top, c0 - left : c1 - left] = pixels[r0:r1, c0:c1]
    return patch


def extract_pair(
    primary_img: BreastImage,
    contralateral_img: BreastImage | None,
    center_rc: tuple[int, int],
    size_px: int = 300,
    *,
    label: str = "negative",
) -> PatchPair:
    """Patch pair at ``center_rc``; the partner comes from the mirrored opposite view.

    Raises:
        ShapeMismatchError: If the two views do not share a shape.
    """
    primary = extract_patch(primary_img, center_rc, size_px)
    if contralateral_img is None:
        partner = np.zeros_like(primary)
    else:
        if contralateral_img.pixels.shape != primary_img.pixels.shape:
            raise ShapeMismatchError(
                f"{primary_img.image_id}: contra-lateral shape {contralateral_img.pixels.shape} "
                f"!= {primary_img.pixels.shape}"
            )
        partner = extract_patch(mirror_contralateral(contralateral_img), center_rc, size_px)
    return PatchPair(
        primary=primary,
        contralateral=partner,
        label=label,
        has_contralateral=contralateral_img is not None,
        provenance=(primary_img.exam_id, primary_img.image_id, (int(center_rc[0]), int(center_rc[1]))),
    )


def sample_negatives(
    cands: t.Sequence[Candidate],
    lesions: t.Sequence[Lesion],
    spacing_cm: float,
    min_lesion_dist_cm: float = 2.0,
    min_inter_dist_cm: float = 1.4,
    rng: np.random.Generator | None = None,
) -> list[Candidate]:
    """Thin out negative candidates of one image.

    Keeps negatives at least ``min_lesion_dist_cm`` from every lesion center,
    then greedily (descending score, random tie-break) accepts candidates at
    least ``min_inter_dist_cm`` from all accepted ones.
    """
    rng = rng or np.random.default_rng()
    if any(c.label == "unknown" for c in cands):
        raise ValueError("sample_negatives needs labeled candidates")
    negatives = [c for c in cands if c.label == "negative"]
    far = [
        c
        for c in negatives
        if all(
            math.hypot(c.center_rc[0] - les.center_rc[0], c.center_rc[1] - les.center_rc[1]) * spacing_cm
            >= min_lesion_dist_cm
            for les in lesions
        )
    ]
    ties = rng.random(len(far))
    order = sorted(range(len(far)), key=lambda i: (-far[i].score, ties[i]))
    kept: list[Candidate] = []
    for i in order:
        cand = far[i]
        if all(
            math.hypot(cand.center_rc[0] - k.center_rc[0], cand.center_rc[1] - k.center_rc[1]) * spacing_cm
            >= min_inter_dist_cm
            for k in kept
        ):
            kept.append(cand)
    return kept


def _warp(patch: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    if not np.any(patch):
        return np.zeros_like(patch)
    tform = transform.AffineTransform(matrix=matrix)
    warped = transform.warp(
        patch.astype(np.float64),
        tform.inverse,
        order=1,
        mode="constant",
        cval=0.0,
        preserve_range=True,
    )
    return warped.astype(patch.dtype, copy=False)


def affine_about_center(size: int, *, scale: float = 1.0, rotate_deg: float = 0.0, shift_rc=(0.0, 0.0)) -> np.ndarray:
    """Forward 3x3 affine in skimage (x=col, y=row) coordinates about the patch center."""
    center = (size - 1) / 2.0
    theta = math.radians(rotate_deg)
    linear = scale * np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    matrix = np.eye(3)
    matrix[:2, :2] = linear
    offset = np.array([center, center]) - linear @ np.array([center, center])
    matrix[:2, 2] = offset + np.array([shift_rc[1], shift_rc[0]])
    return matrix


def augment(pair: PatchPair, cfg: AugmentConfig, rng: np.random.Generator) -> PatchPair:
    """Randomly perturb a pair; both patches always receive the same transform.

    Positives are first flipped horizontally (with ``flip_probability``) and
    Gaussian blurred. Then, with ``apply_probability``, exactly one of
    scaling, translation or rotation is applied.
    """
    primary, partner = pair.primary, pair.contralateral
    if pair.label == "positive":
        if rng.random() < cfg.flip_probability:
            primary, partner = primary[:, ::-1].copy(), partner[:, ::-1].copy()
        sigma = rng.uniform(*cfg.blur_sigma_range)
        primary = ndimage.gaussian_filter(primary, sigma, truncate=4.0, mode="constant")
        partner = ndimage.gaussian_filter(partner, sigma, truncate=4.0, mode="constant")
    if rng.random() < cfg.apply_probability:
        size = primary.shape[0]
        kind = int(rng.integers(0, 3))
        if kind == 0:
            matrix = affine_about_center(size, scale=rng.uniform(*cfg.scale_range))
        elif kind == 1:
            shift = (rng.uniform(*cfg.translate_range_px), rng.uniform(*cfg.translate_range_px))
            matrix = affine_about_center(size, shift_rc=shift)
        else:
            matrix = affine_about_center(size, rotate_deg=rng.uniform(*cfg.rotate_range_deg))
        primary, partner = _warp(primary, matrix), _warp(partner, matrix)
    return dataclasses.replace(pair, primary=primary, contralateral=partner)


def resample(patch: np.ndarray, size_px: int) -> np.ndarray:
    """Bilinear resize of a square patch to ``size_px``."""
    if patch.shape[0] == size_px:
        return patch
    return transform.resize(
        patch,
        (size_px, size_px),
        order=1,
        mode="constant",
        cval=0.0,
        anti_aliasing=size_px < patch.shape[0],
        preserve_range=True,
    )


@dataclass(frozen=True, eq=False)
class PatchArchive:
    """A split's patches as stacked float32 arrays plus the provenance index."""

    primary: np.ndarray
    contralateral: np.ndarray
    labels: np.ndarray
    has_contralateral: np.ndarray
    index: list[dict[str, t.Any]]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def patch_size(self) -> int:
        """Side length of the stored patches."""
        return int(self.primary.shape[-1])

    def pair(self, i: int) -> PatchPair:
        """Record ``i`` as a :class:`PatchPair`."""
        entry = self.index[i] if self.index else {}
        return PatchPair(
            primary=np.asarray(self.primary[i]),
            contralateral=np.asarray(self.contralateral[i]),
            label="positive" if self.labels[i] else "negative",
            has_contralateral=bool(self.has_contralateral[i]),
            provenance=(entry.get("exam_id", ""), entry.get("image_id", ""), (entry.get("row", 0), entry.get("col", 0))),
        )

    @classmethod
    def from_pairs(cls, pairs: t.Sequence[PatchPair], index: list[dict[str, t.Any]]) -> PatchArchive:
        """Stack in-memory pairs."""
        if not pairs:
            raise ValueError("cannot build an archive from zero pairs")
        return cls(
            primary=np.stack([p.primary for p in pairs]).astype(np.float32),
            contralateral=np.stack([p.contralateral for p in pairs]).astype(np.float32),
            labels=np.array([p.label == "positive" for p in pairs], dtype=np.uint8),
            has_contralateral=np.array([p.has_contralateral for p in pairs], dtype=np.uint8),
            index=index,
        )


def _record_dtype(size: int) -> np.dtype:
    return np.dtype(
        [
            ("label", "u1"),
            ("has_contralateral", "u1"),
            ("primary", "<f4", (size, size)),
            ("contralateral", "<f4", (size, size)),
        ]
    )


def write_archive(
    path: Path,
    archive: PatchArchive,
    provenance_block: t.Mapping[str, t.Any],
    extra: t.Mapping[str, t.Any] | None = None,
) -> None:
    """Write ``path`` (binary records) and ``path.json`` (index + provenance)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    size = archive.patch_size
    header = np.zeros(1, dtype=_HEADER)
    header[0] = (_MAGIC, ARCHIVE_SCHEMA_VERSION, len(archive), size, b"<f4")
    records = np.zeros(len(archive), dtype=_record_dtype(size))
    records["label"] = archive.labels
    records["has_contralateral"] = archive.has_contralateral
    records["primary"] = archive.primary
    records["contralateral"] = archive.contralateral
    with path.open("wb") as fh:
        fh.write(header.tobytes())
        fh.write(records.tobytes())
    index_doc = {
        "schema_version": ARCHIVE_SCHEMA_VERSION,
        "provenance": dict(provenance_block),
        "count": len(archive),
        "patch_size": size,
        "records": archive.index,
        **(extra or {}),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(index_doc, indent=2, sort_keys=True) + "\n")
    logger.info("Wrote patch archive", extra={"path": str(path), "count": len(archive)})


def read_archive(path: Path) -> PatchArchive:
    """Memory-map an archive written by :func:`write_archive`."""
    path = Path(path)
    header = np.fromfile(path, dtype=_HEADER, count=1)[0]
    if header["magic"] != _MAGIC or int(header["version"]) != ARCHIVE_SCHEMA_VERSION:
        raise SchemaVersionError(str(path), int(header["version"]), ARCHIVE_SCHEMA_VERSION)
    size, count = int(header["size"]), int(header["count"])
    records = np.memmap(path, dtype=_record_dtype(size), mode="r", offset=_HEADER.itemsize, shape=(count,))
    index_path = path.with_suffix(path.suffix + ".json")
    index_doc = json.loads(index_path.read_text()) if index_path.exists() else {}
    if index_doc and index_doc.get("schema_version") != ARCHIVE_SCHEMA_VERSION:
        raise SchemaVersionError(str(index_path), index_doc.get("schema_version"), ARCHIVE_SCHEMA_VERSION)
    return PatchArchive(
        primary=records["primary"],
        contralateral=records["contralateral"],
        labels=np.asarray(records["label"]),
        has_contralateral=np.asarray(records["has_contralateral"]),
        index=index_doc.get("records", []),
    )


PairLoader = t.Callable[["Exam", "ImageRecord"], "BreastImage"]


def build_pairs(
    manifest: DatasetManifest,
    frame: pd.DataFrame,
    load: PairLoader,
    *,
    size_px: int = 300,
    output_size_px: int | None = None,
    subsample_negatives: bool = False,
    min_lesion_dist_cm: float = 2.0,
    min_inter_dist_cm: float = 1.4,
    seed: int = 0,
    threads: int = 1,
) -> tuple[PatchArchive, dict[str, t.Any]]:
    """Patch pairs for every candidate of a split.

    Args:
        manifest: Exams of the split.
        frame: Their labeled candidates.
        load: Returns the view of ``(exam, record)``.
        size_px: Extraction window.
        output_size_px: Resampled side length (``None`` keeps ``size_px``).
        subsample_negatives: Thin negatives with :func:`sample_negatives`
            (training split only).
        min_lesion_dist_cm: Negative-to-lesion distance floor.
        min_inter_dist_cm: Negative-to-negative distance floor.
        seed: Seed of the per-image tie-break streams.
        threads: Worker threads (one exam per task).

    Returns:
        The archive and extraction counts.
    """
    out_size = output_size_px or size_px
    by_image: dict[str, list[Candidate]] = {}
    for cand in frame_to_candidates(frame):
        by_image.setdefault(cand.image_id, []).append(cand)

    def exam_pairs(exam: Exam) -> list[tuple[PatchPair, dict[str, t.Any], bool]]:
        views = {record.image_id: load(exam, record) for record in exam.images}
        rows = []
        for k, record in enumerate(exam.images):
            cands = by_image.get(record.image_id, [])
            if not cands:
                continue
            image = views[record.image_id]
            if subsample_negatives:
                rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(exam.index, k)))
                kept = sample_negatives(
                    cands, record.lesions, image.pixel_spacing_cm, min_lesion_dist_cm, min_inter_dist_cm, rng
                )
                keep_ids = {id(c) for c in kept}
                cands = [c for c in cands if c.label == "positive" or id(c) in keep_ids]
            partner_record = exam.contralateral(record)
            partner = views[partner_record.image_id] if partner_record is not None else None
            if partner is None:
                logger.debug("No contra-lateral view for %s", record.image_id)
            for cand in cands:
                pair = extract_pair(image, partner, cand.center_rc, size_px, label=cand.label)
                if out_size != size_px:
                    pair = dataclasses.replace(
                        pair,
                        primary=resample(pair.primary, out_size),
                        contralateral=resample(pair.contralateral, out_size),
                    )
                entry = {
                    "exam_id": exam.exam_id,
                    "image_id": record.image_id,
                    "row": cand.center_rc[0],
                    "col": cand.center_rc[1],
                    "score": cand.score,
                    "label": cand.label,
                    "lesion_id": cand.lesion_id,
                    "has_contralateral": pair.has_contralateral,
                }
                rows.append((pair, entry, cand.label == "negative"))
        return rows

    per_exam = Parallel(n_jobs=threads, prefer="threads")(delayed(exam_pairs)(exam) for exam in manifest.exams)
    rows = [row for chunk in per_exam for row in chunk]
    if not rows:
        raise InsufficientDataError("no candidates to extract patches from")
    n_negative_in = int((frame["label"] == "negative").sum())
    n_negative = sum(1 for _, _, negative in rows if negative)
    stats = {
        "n_candidates": int(len(frame)),
        "n_pairs": len(rows),
        "n_positive": len(rows) - n_negative,
        "n_negative": n_negative,
        "kept_negative_fraction": n_negative / n_negative_in if n_negative_in else 0.0,
        "negative_share": n_negative / len(rows),
        "n_missing_contralateral": sum(1 for _, entry, _ in rows if not entry["has_contralateral"]),
    }
    logger.info("Extracted patch pairs", extra=stats)
    archive = PatchArchive.from_pairs([pair for pair, _, _ in rows], [entry for _, entry, _ in rows])
    return archive, stats


__all__ = [
    "AugmentConfig",
    "build_pairs",
    "PatchArchive",
    "PatchPair",
    "augment",
    "extract_pair",
    "extract_patch",
    "mirror_contralateral",
    "read_archive",
    "sample_negatives",
    "write_archive",
]
