"""Suspicious mass candidates.

A pixel-level mass likelihood combines two cues: how many gradient vectors
in a surrounding annulus converge on the pixel, and how strongly the pixel
sits on a bright line or blob (largest negative oriented second
derivative). A global threshold on the map yields connected regions; the
maximum of each region is a candidate.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage, signal

from symmetry_cad.exceptions import NonFiniteError
from symmetry_cad.io import read_csv_artifact, write_csv_artifact

if t.TYPE_CHECKING:
    from symmetry_cad.phantom import BreastImage, Lesion

logger = logging.getLogger(__name__)

CANDIDATES_SCHEMA_VERSION = 1
CANDIDATE_COLUMNS = ["exam_id", "image_id", "row", "col", "score", "label", "lesion_id", "split"]
LABELS = ("positive", "negative", "unknown")


@dataclass(frozen=True, eq=False)
class LikelihoodMap:
    """Per-pixel mass likelihood in [0, 1], same shape as its source image."""

    values: np.ndarray
    source_image_id: str = ""


@dataclass(frozen=True)
class Candidate:
    """A suspected mass center."""

    center_rc: tuple[int, int]
    score: float
    label: str = "unknown"
    image_id: str = ""
    exam_id: str = ""
    lesion_id: str | None = None


@dataclass(frozen=True)
class LikelihoodParams:
    """Knobs of :func:`mass_likelihood`."""

    n_orientations: int = 16
    tolerance_deg: float = 22.5
    gradient_sigma_px: float = 2.0
    min_gradient: float = 0.006
    min_support_fraction: float = 0.1
    line_weight: float = 0.3
    line_scales: int = 3


def _direction_vectors(n: int) -> np.ndarray:
    """Unit vectors (d_row, d_col) whose set is closed under col -> -col, bitwise."""
    angles = 2.0 * math.pi * np.arange(n) / n
    vectors = np.stack([np.sin(angles), np.cos(angles)], axis=1)
    vectors[np.abs(vectors) < 1e-12] = 0.0
    for k in range(n):
        partner = (n // 2 - k) % n
        if k < partner:
            vectors[partner] = (vectors[k, 0], -vectors[k, 1])
    return vectors


def _annulus_offsets(radius_range_px: tuple[float, float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r_max = int(math.ceil(radius_range_px[1]))
    dr, dc = np.mgrid[-r_max : r_max + 1, -r_max : r_max + 1].astype(np.float64)
    dist = np.hypot(dr, dc)
    ring = (dist >= radius_range_px[0]) & (dist <= radius_range_px[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        unit_r = np.where(dist > 0, dr / dist, 0.0)
        unit_c = np.where(dist > 0, dc / dist, 0.0)
    return ring, unit_r, unit_c


def _convergence(
    pixels: np.ndarray, radius_range_px: tuple[float, float], params: LikelihoodParams
) -> np.ndarray:
    grad_r = ndimage.gaussian_filter(pixels, params.gradient_sigma_px, order=(1, 0))
    grad_c = ndimage.gaussian_filter(pixels, params.gradient_sigma_px, order=(0, 1))
    magnitude = np.hypot(grad_r, grad_c)
    significant = magnitude > params.min_gradient
    if not significant.any():
        return np.zeros_like(pixels)
    safe = np.where(significant, magnitude, 1.0)
    unit_r = np.where(significant, grad_r / safe, 0.0)
    unit_c = np.where(significant, grad_c / safe, 0.0)

    directions = _direction_vectors(params.n_orientations)
    # Soft assignment of each gradient to the orientation bins.
    cosines = unit_r[None] * directions[:, 0, None, None] + unit_c[None] * directions[:, 1, None, None]
    weights = np.maximum(cosines, 0.0) ** 4
    total = weights.sum(axis=0)
    weights = np.where(significant, weights / np.where(total > 0, total, 1.0), 0.0)

    ring, off_r, off_c = _annulus_offsets(radius_range_px)
    cos_tol = math.cos(math.radians(params.tolerance_deg))
    # Kernel k collects pixels lying along +direction_k from the voting gradient.
    cones = np.stack(
        [ring & (off_r * d_r + off_c * d_c >= cos_tol) for d_r, d_c in directions]
    ).astype(np.float64)
    votes = signal.fftconvolve(weights, cones, mode="same", axes=(1, 2)).sum(axis=0)
    support = signal.fftconvolve(significant.astype(np.float64), ring.astype(np.float64), mode="same")
    floor = params.min_support_fraction * float(ring.sum())
    concordance = np.clip(votes, 0.0, None) / np.maximum(support, floor)
    return np.clip(concordance, 0.0, 1.0)


def _line_response(pixels: np.ndarray, radius_range_px: tuple[float, float], params: LikelihoodParams) -> np.ndarray:
    """Scale-normalized maximum over orientations of the negative second derivative."""
    lo, hi = radius_range_px[0] / 2.0, radius_range_px[1] / 2.0
    response = np.zeros_like(pixels)
    for sigma in np.geomspace(max(lo, 1.0), max(hi, 1.0), params.line_scales):
        h_rr = ndimage.gaussian_filter(pixels, sigma, order=(2, 0))
        h_cc = ndimage.gaussian_filter(pixels, sigma, order=(0, 2))
        h_rc = ndimage.gaussian_filter(pixels, sigma, order=(1, 1))
        # Smallest Hessian eigenvalue = most negative directional second derivative.
        lam_min = 0.5 * (h_rr + h_cc) - np.sqrt(0.25 * (h_rr - h_cc) ** 2 + h_rc**2)
        response = np.maximum(response, sigma**2 * np.maximum(-lam_min, 0.0))
    return response


def mass_likelihood(
    image: BreastImage | np.ndarray,
    radius_range_px: tuple[float, float] = (12.0, 63.0),
    params: LikelihoodParams | None = None,
) -> LikelihoodMap:
    """Pixel-level mass likelihood of a breast image.

    Args:
        image: A rendered/loaded view, or a bare raster.
        radius_range_px: Inner and outer radius of the gradient annulus.
        params: Feature knobs; defaults suit the default phantom.

    Returns:
        The map rescaled by its own maximum (all zeros for a featureless image).

    Raises:
        NonFiniteError: If the image contains NaN or Inf.
        ValueError: If the radius range is not positive and ordered.
    """
    params = params or LikelihoodParams()
    pixels = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    image_id = getattr(image, "image_id", "")
    if not np.all(np.isfinite(pixels)):
        raise NonFiniteError("mass_likelihood", f"image {image_id!r} has non-finite pixels")
    if not 0 < radius_range_px[0] <= radius_range_px[1]:
        raise ValueError(f"radius range must be positive and ordered, got {radius_range_px}")
    if np.ptp(pixels) == 0:
        return LikelihoodMap(np.zeros_like(pixels), image_id)

    combined = (1.0 - params.line_weight) * _convergence(pixels, radius_range_px, params)
    if params.line_weight > 0:
        line = _line_response(pixels, radius_range_px, params)
        peak = line.max()
        if peak > 0:
            combined += params.line_weight * line / peak
    top = combined.max()
    values = combined / top if top > 0 else np.zeros_like(combined)
    return LikelihoodMap(np.clip(values, 0.0, 1.0), image_id)


def threshold_candidates(
    likelihood: LikelihoodMap,
    threshold: float,
    min_separation_px: float = 70.0,
    *,
    exam_id: str = "",
    max_count: int | None = None,
) -> list[Candidate]:
    """Candidates from a global threshold on a likelihood map.

    Each 8-connected region of ``values >= threshold`` (restricted to positive
    values) contributes its maximum pixel; maxima closer than
    ``min_separation_px`` are merged, keeping the higher score. With
    ``max_count`` only the highest-scoring candidates are kept.

    Returns:
        Candidates sorted by descending score.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    values = likelihood.values
    mask = (values >= threshold) & (values > 0)
    labels, n_regions = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n_regions == 0:
        return []
    positions = ndimage.maximum_position(values, labels, index=np.arange(1, n_regions + 1))
    peaks = sorted(
        ((float(values[pos]), (int(pos[0]), int(pos[1]))) for pos in positions),
        key=lambda item: (-item[0], item[1]),
    )
    kept: list[tuple[float, tuple[int, int]]] = []
    for score, pos in peaks:
        if all(math.hypot(pos[0] - q[0], pos[1] - q[1]) >= min_separation_px for _, q in kept):
            kept.append((score, pos))
    if max_count is not None:
        kept = kept[: max(int(max_count), 0)]
    return [
        Candidate(center_rc=pos, score=score, image_id=likelihood.source_image_id, exam_id=exam_id)
        for score, pos in kept
    ]


def label_candidates(cands: t.Sequence[Candidate], lesions: t.Sequence[Lesion]) -> list[Candidate]:
    """Mark candidates inside a lesion support positive (recording which lesion)."""
    labeled = []
    for cand in cands:
        hit = next((lesion for lesion in lesions if lesion.contains(*cand.center_rc)), None)
        labeled.append(
            dataclasses.replace(
                cand,
                label="positive" if hit else "negative",
                lesion_id=hit.lesion_id if hit else None,
            )
        )
    return labeled


def detect_candidates(
    image: BreastImage,
    threshold: float,
    *,
    radius_range_px: tuple[float, float] = (12.0, 63.0),
    min_separation_px: float = 70.0,
    params: LikelihoodParams | None = None,
) -> list[Candidate]:
    """Likelihood, threshold and labeling for one view."""
    likelihood = mass_likelihood(image, radius_range_px, params)
    cands = threshold_candidates(likelihood, threshold, min_separation_px, exam_id=image.exam_id)
    return label_candidates(cands, image.lesions)


def tune_threshold(
    maps: t.Sequence[LikelihoodMap],
    max_per_image: float,
    min_separation_px: float = 70.0,
    *,
    floor: float = 0.05,
    resolution: float = 0.005,
) -> float:
    """Lowest threshold keeping the mean candidate count within ``max_per_image``.

    Bisection over ``[floor, 1]``; the count is non-increasing in the
    threshold except where a region splits into separated peaks.
    """
    if not maps:
        return floor

    def mean_count(threshold: float) -> float:
        return float(np.mean([len(threshold_candidates(m, threshold, min_separation_px)) for m in maps]))

    if mean_count(floor) <= max_per_image:
        return floor
    lo, hi = floor, 1.0
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if mean_count(mid) <= max_per_image:
            hi = mid
        else:
            lo = mid
    logger.info("Tuned candidate threshold", extra={"threshold": hi, "budget": max_per_image})
    return math.ceil(hi * 1e6) / 1e6


def candidates_frame(cands: t.Iterable[Candidate], split: str | None = None) -> pd.DataFrame:
    """Tabular form of candidates with the artifact's column layout."""
    rows = [
        {
            "exam_id": c.exam_id,
            "image_id": c.image_id,
            "row": c.center_rc[0],
            "col": c.center_rc[1],
            "score": c.score,
            "label": c.label,
            "lesion_id": c.lesion_id,
            "split": split,
        }
        for c in cands
    ]
    return pd.DataFrame(rows, columns=CANDIDATE_COLUMNS)


def frame_to_candidates(frame: pd.DataFrame) -> list[Candidate]:
    """Inverse of :func:`candidates_frame`."""
    return [
        Candidate(
            center_rc=(int(row.row), int(row.col)),
            score=float(row.score),
            label=str(row.label),
            image_id=str(row.image_id),
            exam_id=str(row.exam_id),
            lesion_id=None if pd.isna(row.lesion_id) else str(row.lesion_id),
        )
        for row in frame.itertuples(index=False)
    ]


def write_candidates(path: Path, frame: pd.DataFrame, provenance: t.Mapping[str, t.Any]) -> None:
    """Write a candidate CSV with its provenance header line."""
    write_csv_artifact(path, frame, CANDIDATES_SCHEMA_VERSION, provenance)


def read_candidates(path: Path) -> pd.DataFrame:
    """Read a candidate CSV, checking its schema version."""
    frame = read_csv_artifact(path, CANDIDATES_SCHEMA_VERSION)
    frame["lesion_id"] = frame["lesion_id"].astype(object).where(frame["lesion_id"].notna(), None)
    return frame


def candidate_table(frame: pd.DataFrame, missing_exam_ids: t.Collection[str]) -> dict[str, dict[str, list[int]]]:
    """Candidate counts per split and label as ``[complete exams, exams missing a breast]``."""
    missing = frame["exam_id"].isin(list(missing_exam_ids))
    table: dict[str, dict[str, list[int]]] = {}
    for split, part in frame.groupby("split", sort=True):
        part_missing = missing.loc[part.index]
        table[str(split)] = {
            label: [
                int(((part["label"] == label) & ~part_missing).sum()),
                int(((part["label"] == label) & part_missing).sum()),
            ]
            for label in ("negative", "positive")
        }
    return table


__all__ = [
    "Candidate",
    "LikelihoodMap",
    "LikelihoodParams",
    "detect_candidates",
    "label_candidates",
    "mass_likelihood",
    "threshold_candidates",
    "tune_threshold",
]
