"""Candidate, image and exam level evaluation.

Scores are compared with the Mann-Whitney AUC, FROC curves per image and
per exam, and the competition performance metric (mean FROC sensitivity at
1/8 ... 8 false positives per unit). Uncertainty comes from a bootstrap that
resamples whole exams.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import typing as t
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats
from sklearn import metrics as sk_metrics

from symmetry_cad.exceptions import ShapeMismatchError, UndefinedMetricError

if t.TYPE_CHECKING:
    from symmetry_cad.phantom import DatasetManifest

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
CPM_OPERATING_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
UNITS = ("image", "exam")
MAX_REDRAWS = 1000


@dataclass(frozen=True)
class ScoredCandidate:
    """A candidate with a model score; positive candidates name the lesion they hit."""

    score: float
    label: str
    image_id: str
    exam_id: str
    lesion_id: str | None = None

    def __post_init__(self) -> None:
        if self.label not in ("positive", "negative"):
            raise ValueError(f"label must be positive or negative, got {self.label!r}")
        if (self.label == "positive") != (self.lesion_id is not None):
            raise ValueError(f"{self.image_id}: positive candidates need a lesion_id, negatives none")


@dataclass(frozen=True)
class LesionRef:
    """One lesion as seen in one image."""

    lesion_id: str
    image_id: str
    exam_id: str


def _grouped(codes: np.ndarray, n_groups: int) -> tuple[list[np.ndarray], np.ndarray]:
    order = np.argsort(codes, kind="stable")
    counts = np.bincount(codes, minlength=n_groups)
    return np.split(order, np.cumsum(counts)[:-1]), counts


def _local_codes(owner: np.ndarray, n_owners: int) -> np.ndarray:
    """Position of each item among the items sharing its owner."""
    local = np.zeros(len(owner), dtype=np.intp)
    groups, _ = _grouped(owner, n_owners)
    for members in groups:
        local[members] = np.arange(len(members))
    return local


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Scored candidates plus the image, exam and lesion units they are judged against.

    All references are integer codes: ``exam`` and ``image`` index the exam
    and image units, ``lesion`` indexes physical lesions (``-1`` for
    negatives). Each lesion occurrence pairs a lesion with an image it is
    visible in.
    """

    scores: np.ndarray
    positive: np.ndarray
    exam: np.ndarray
    image: np.ndarray
    lesion: np.ndarray
    image_exam: np.ndarray
    occurrence_image: np.ndarray
    occurrence_lesion: np.ndarray
    lesion_exam: np.ndarray
    n_exams: int

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    @classmethod
    def build(
        cls,
        cands: t.Sequence[ScoredCandidate],
        lesions: t.Sequence[LesionRef],
        image_units: t.Mapping[str, str],
    ) -> CandidateSet:
        """Encode candidates against every image unit (``image_id -> exam_id``), normal ones included."""
        exam_ids = sorted(set(image_units.values()))
        exam_code = {e: i for i, e in enumerate(exam_ids)}
        image_ids = sorted(image_units)
        image_code = {im: i for i, im in enumerate(image_ids)}
        lesion_keys = sorted({(ref.exam_id, ref.lesion_id) for ref in lesions})
        lesion_code = {key: i for i, key in enumerate(lesion_keys)}
        occurrences = sorted({(image_code[ref.image_id], lesion_code[(ref.exam_id, ref.lesion_id)]) for ref in lesions})
        try:
            exam = np.array([exam_code[c.exam_id] for c in cands], dtype=np.intp)
            image = np.array([image_code[c.image_id] for c in cands], dtype=np.intp)
            lesion = np.array(
                [lesion_code[(c.exam_id, c.lesion_id)] if c.lesion_id is not None else -1 for c in cands],
                dtype=np.intp,
            )
        except KeyError as exc:
            raise ValueError(f"candidate refers to an unknown unit or lesion: {exc}") from exc
        occ_image = np.array([o[0] for o in occurrences], dtype=np.intp)
        occ_lesion = np.array([o[1] for o in occurrences], dtype=np.intp)
        occ_keys = set(occurrences)
        for c, im, les in zip(cands, image, lesion):
            if les >= 0 and (int(im), int(les)) not in occ_keys:
                raise ValueError(f"{c.image_id}: lesion {c.lesion_id} is not visible in this image")
        return cls(
            scores=np.array([c.score for c in cands], dtype=np.float64),
            positive=np.array([c.label == "positive" for c in cands], dtype=bool),
            exam=exam,
            image=image,
            lesion=lesion,
            image_exam=np.array([exam_code[image_units[im]] for im in image_ids], dtype=np.intp),
            occurrence_image=occ_image,
            occurrence_lesion=occ_lesion,
            lesion_exam=np.array([exam_code[key[0]] for key in lesion_keys], dtype=np.intp),
            n_exams=len(exam_ids),
        )

    def with_scores(self, scores: np.ndarray) -> CandidateSet:
        """Same candidates, other scores."""
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != self.scores.shape:
            raise ShapeMismatchError(f"{scores.shape[0]} scores for {len(self)} candidates")
        return dataclasses.replace(self, scores=scores)

    def subset(self, mask: np.ndarray) -> CandidateSet:
        """Keep candidates where ``mask`` is true; units and lesions stay."""
        mask = np.asarray(mask, dtype=bool)
        return dataclasses.replace(
            self,
            scores=self.scores[mask],
            positive=self.positive[mask],
            exam=self.exam[mask],
            image=self.image[mask],
            lesion=self.lesion[mask],
        )

    @functools.cached_property
    def _exam_groups(self) -> dict[str, t.Any]:
        n_lesions = len(self.lesion_exam)
        cand_groups, cand_counts = _grouped(self.exam, self.n_exams)
        image_groups, image_counts = _grouped(self.image_exam, self.n_exams)
        lesion_groups, lesion_counts = _grouped(self.lesion_exam, self.n_exams)
        occ_exam = self.lesion_exam[self.occurrence_lesion] if n_lesions else np.zeros(0, dtype=np.intp)
        occ_groups, occ_counts = _grouped(occ_exam, self.n_exams)
        return {
            "cand": (cand_groups, cand_counts),
            "image": (image_groups, image_counts),
            "lesion": (lesion_groups, lesion_counts),
            "occ": (occ_groups, occ_counts),
            "image_local": _local_codes(self.image_exam, self.n_exams),
            "lesion_local": _local_codes(self.lesion_exam, self.n_exams),
        }

    def resample(self, rng: np.random.Generator) -> tuple[CandidateSet, np.ndarray]:
        """Draw exams with replacement; repeated exams become distinct units.

        Returns:
            The resampled set and, for each of its candidates, the index of
            the source candidate (to carry other score columns along).
        """
        groups = self._exam_groups
        draw = rng.integers(0, self.n_exams, size=self.n_exams)
        positions = np.arange(self.n_exams)

        def gather(kind: str) -> tuple[np.ndarray, np.ndarray]:
            members, counts = groups[kind]
            picked = [members[e] for e in draw]
            index = np.concatenate(picked) if picked else np.zeros(0, dtype=np.intp)
            return index.astype(np.intp, copy=False), np.repeat(positions, counts[draw])

        cand_idx, cand_slot = gather("cand")
        _, image_slot = gather("image")
        _, lesion_slot = gather("lesion")
        occ_idx, occ_slot = gather("occ")
        image_offset = np.concatenate([[0], np.cumsum(groups["image"][1][draw])])[:-1]
        lesion_offset = np.concatenate([[0], np.cumsum(groups["lesion"][1][draw])])[:-1]
        image_local, lesion_local = groups["image_local"], groups["lesion_local"]

        old_lesion = self.lesion[cand_idx]
        new_lesion = np.where(
            old_lesion >= 0,
            lesion_offset[cand_slot] + lesion_local[np.maximum(old_lesion, 0)] if len(lesion_local) else -1,
            -1,
        )
        resampled = CandidateSet(
            scores=self.scores[cand_idx],
            positive=self.positive[cand_idx],
            exam=cand_slot,
            image=image_offset[cand_slot] + image_local[self.image[cand_idx]],
            lesion=new_lesion.astype(np.intp),
            image_exam=image_slot,
            occurrence_image=image_offset[occ_slot] + image_local[self.occurrence_image[occ_idx]],
            occurrence_lesion=lesion_offset[occ_slot] + lesion_local[self.occurrence_lesion[occ_idx]],
            lesion_exam=lesion_slot,
            n_exams=self.n_exams,
        )
        return resampled, cand_idx


def candidate_set_from_frame(frame: pd.DataFrame, manifest: DatasetManifest, score_column: str = "score") -> CandidateSet:
    """Encode a candidate table against the exams of ``manifest``."""
    image_units: dict[str, str] = {}
    lesions: list[LesionRef] = []
    for exam, record in manifest.iter_images():
        image_units[record.image_id] = exam.exam_id
        lesions.extend(LesionRef(les.lesion_id, record.image_id, exam.exam_id) for les in record.lesions)
    cands = [
        ScoredCandidate(
            score=float(getattr(row, score_column)),
            label=str(row.label),
            image_id=str(row.image_id),
            exam_id=str(row.exam_id),
            lesion_id=None if pd.isna(row.lesion_id) else str(row.lesion_id),
        )
        for row in frame.itertuples(index=False)
    ]
    return CandidateSet.build(cands, lesions, image_units)


# metrics


def auc_from_scores(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg).

    Raises:
        UndefinedMetricError: If either class is absent.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = stats.rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(cands: t.Sequence[ScoredCandidate]) -> float:
    """Candidate-level AUC."""
    return auc_from_scores(
        np.array([c.score for c in cands], dtype=np.float64),
        np.array([c.label == "positive" for c in cands], dtype=bool),
    )


@dataclass(frozen=True, eq=False)
class FrocCurve:
    """Operating points in descending threshold order."""

    thresholds: np.ndarray
    fp_per_unit: np.ndarray
    sensitivity: np.ndarray
    unit: str

    def __len__(self) -> int:
        return int(self.thresholds.shape[0])

    def to_frame(self) -> pd.DataFrame:
        """Curve as ``threshold, fp_per_unit, sensitivity`` columns."""
        return pd.DataFrame(
            {"threshold": self.thresholds, "fp_per_unit": self.fp_per_unit, "sensitivity": self.sensitivity}
        )


def froc_from_set(cs: CandidateSet, unit: str = "image") -> FrocCurve:
    """FROC curve over the distinct scores of ``cs``.

    A lesion counts as detected at a threshold if a positive candidate
    hitting it scores at least that much. Per image, every view of a lesion
    is its own target; per exam, a lesion is one target found from any view.
    False positives are negative candidates at or above the threshold,
    divided by the number of units (normal ones included).
    """
    if unit not in UNITS:
        raise ValueError(f"unit must be one of {UNITS}, got {unit!r}")
    n_lesions = len(cs.lesion_exam)
    if n_lesions == 0:
        raise UndefinedMetricError("FROC needs at least one lesion")
    pos = cs.positive
    if unit == "image":
        n_units = len(cs.image_exam)
        occ_keys = cs.occurrence_image * n_lesions + cs.occurrence_lesion
        order = np.argsort(occ_keys)
        keys = cs.image[pos] * n_lesions + cs.lesion[pos]
        target = order[np.searchsorted(occ_keys, keys, sorter=order)] if len(keys) else keys
        n_targets = len(occ_keys)
    else:
        n_units = cs.n_exams
        target = cs.lesion[pos]
        n_targets = n_lesions
    best = np.full(n_targets, -np.inf)
    np.maximum.at(best, target, cs.scores[pos])
    best.sort()
    negatives = np.sort(cs.scores[~pos])

    thresholds = np.unique(cs.scores)[::-1]
    if len(thresholds) == 0:
        thresholds = np.array([np.inf])
    detected = n_targets - np.searchsorted(best, thresholds, side="left")
    false_pos = len(negatives) - np.searchsorted(negatives, thresholds, side="left")
    return FrocCurve(
        thresholds=thresholds,
        fp_per_unit=false_pos / n_units,
        sensitivity=detected / n_targets,
        unit=unit,
    )


def froc(
    cands: t.Sequence[ScoredCandidate],
    lesions: t.Sequence[LesionRef],
    image_units: t.Mapping[str, str],
    unit: str = "image",
) -> FrocCurve:
    """FROC curve of scored candidates against their lesions."""
    return froc_from_set(CandidateSet.build(cands, lesions, image_units), unit)


def cpm(curve: FrocCurve, operating_points: t.Sequence[float] = CPM_OPERATING_POINTS) -> float:
    """Mean sensitivity at the operating points.

    Each sensitivity is read from the rightmost curve point whose FP rate
    does not exceed the operating point (0 if there is none).
    """
    ops = np.asarray(operating_points, dtype=np.float64)
    idx = np.searchsorted(curve.fp_per_unit, ops, side="right") - 1
    sens = np.where(idx >= 0, curve.sensitivity[np.maximum(idx, 0)], 0.0)
    return float(sens.mean())


def auc_metric(cs: CandidateSet) -> float:
    """AUC of a candidate set (bootstrap metric)."""
    return auc_from_scores(cs.scores, cs.positive)


def cpm_metric(unit: str) -> t.Callable[[CandidateSet], float]:
    """CPM at ``unit`` level as a bootstrap metric."""

    def metric(cs: CandidateSet) -> float:
        return cpm(froc_from_set(cs, unit))

    metric.__name__ = f"cpm_{unit}"
    return metric


# bootstrap


def _resampler(data: t.Any) -> t.Callable[[np.random.Generator], tuple[t.Any, np.ndarray]]:
    if hasattr(data, "resample"):
        return data.resample
    array = np.asarray(data)

    def resample(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        index = rng.integers(0, len(array), size=len(array))
        return array[index], index

    return resample


def _bootstrap_values(
    evaluate: t.Callable[[t.Any, np.ndarray], np.ndarray],
    data: t.Any,
    n: int,
    seed: int,
    threads: int,
) -> np.ndarray:
    """Row ``i`` holds ``evaluate`` on resample ``i``; undefined resamples are redrawn."""
    resample = _resampler(data)
    seeds = np.random.SeedSequence(seed).spawn(n)

    def one(seq: np.random.SeedSequence) -> np.ndarray:
        rng = np.random.default_rng(seq)
        for _ in range(MAX_REDRAWS):
            sample, index = resample(rng)
            try:
                return np.atleast_1d(np.asarray(evaluate(sample, index), dtype=np.float64))
            except UndefinedMetricError:
                continue
        raise UndefinedMetricError(f"metric undefined on {MAX_REDRAWS} consecutive resamples")

    rows = Parallel(n_jobs=threads, prefer="threads")(delayed(one)(seq) for seq in seeds)
    return np.vstack(rows)


def bootstrap_ci(
    metric: t.Callable[[t.Any], float],
    data: t.Any,
    n: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    *,
    threads: int = 1,
) -> tuple[float, float]:
    """Percentile bootstrap interval of ``metric``.

    Args:
        metric: Function of a resample (a :class:`CandidateSet` or array).
        data: A :class:`CandidateSet` (resampled by exam) or a sequence
            (resampled by element).
        n: Number of resamples.
        level: Coverage of the interval.
        seed: Resampling seed; resample ``i`` uses its own spawned stream.
        threads: Worker threads.
    """
    values = _bootstrap_values(lambda sample, _: metric(sample), data, n, seed, threads)[:, 0]
    lo, hi = np.percentile(values, [100.0 * (1.0 - level) / 2.0, 100.0 * (1.0 + level) / 2.0])
    return float(lo), float(hi)


def bootstrap_pvalue(
    metric: t.Callable[[CandidateSet], float],
    data: CandidateSet,
    scores_a: np.ndarray,
    scores_b: np.ndarray,
    n: int = 1000,
    seed: int = 0,
    *,
    threads: int = 1,
) -> float:
    """One-sided paired bootstrap p-value for "B improves on A".

    The p-value is the fraction of exam resamples in which B does not beat A
    (ties count against B).
    """
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    if scores_a.shape != scores_b.shape or scores_a.shape != data.scores.shape:
        raise ShapeMismatchError("paired scores must cover the same candidates")

    def evaluate(sample: CandidateSet, index: np.ndarray) -> np.ndarray:
        return np.array([metric(sample.with_scores(scores_a[index])), metric(sample.with_scores(scores_b[index]))])

    values = _bootstrap_values(evaluate, data, n, seed, threads)
    return float(np.mean(values[:, 1] <= values[:, 0]))


# report

METRICS: dict[str, t.Callable[[CandidateSet], float]] = {
    "auc": auc_metric,
    "cpm_image": cpm_metric("image"),
    "cpm_exam": cpm_metric("exam"),
}


def evaluate_models(
    cs: CandidateSet,
    model_scores: t.Mapping[str, np.ndarray],
    *,
    comparisons: t.Sequence[tuple[str, str]] = (),
    missing_contralateral: np.ndarray | None = None,
    n: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    threads: int = 1,
) -> dict[str, t.Any]:
    """Point estimates, bootstrap CIs and paired p-values for several score columns.

    All models share one set of exam resamples so the comparisons are paired.

    Args:
        cs: Candidates and units (its own scores are ignored).
        model_scores: Score column per model name.
        comparisons: ``(reference, candidate)`` pairs to test.
        missing_contralateral: Mask of candidates whose opposite view is
            absent; adds an AUC restricted to them.
        n: Resamples.
        level: CI coverage.
        seed: Bootstrap seed.
        threads: Worker threads.
    """
    names = list(model_scores)
    columns = {name: np.asarray(model_scores[name], dtype=np.float64) for name in names}
    for name, column in columns.items():
        if column.shape != cs.scores.shape:
            raise ShapeMismatchError(f"{name}: {column.shape[0]} scores for {len(cs)} candidates")

    def evaluate(sample: CandidateSet, index: np.ndarray) -> np.ndarray:
        return np.array(
            [fn(sample.with_scores(columns[name][index])) for name in names for fn in METRICS.values()]
        )

    table = _bootstrap_values(evaluate, cs, n, seed, threads).reshape(n, len(names), len(METRICS))
    lo_q, hi_q = 100.0 * (1.0 - level) / 2.0, 100.0 * (1.0 + level) / 2.0
    models: dict[str, dict[str, t.Any]] = {}
    for m, name in enumerate(names):
        entry: dict[str, t.Any] = {}
        scored = cs.with_scores(columns[name])
        for k, (metric_name, fn) in enumerate(METRICS.items()):
            point = fn(scored)
            lo, hi = np.percentile(table[:, m, k], [lo_q, hi_q])
            entry[metric_name] = float(point)
            entry[f"{metric_name}_ci"] = [float(min(lo, point)), float(max(hi, point))]
        if missing_contralateral is not None:
            subset = scored.subset(missing_contralateral)
            try:
                entry["auc_missing_contralateral"] = auc_metric(subset)
            except UndefinedMetricError:
                logger.warning("AUC over missing-contralateral candidates is undefined", extra={"model": name})
                entry["auc_missing_contralateral"] = None
            entry["n_missing_contralateral"] = int(np.count_nonzero(missing_contralateral))
        models[name] = entry

    p_values: dict[str, dict[str, float]] = {}
    for reference, challenger in comparisons:
        a, b = names.index(reference), names.index(challenger)
        p_values[f"{challenger}_vs_{reference}"] = {
            metric_name: float(np.mean(table[:, b, k] <= table[:, a, k])) for k, metric_name in enumerate(METRICS)
        }
    logger.info("Evaluated models", extra={"models": names, "bootstrap_n": n})
    return {
        "models": models,
        "p_values": p_values,
        "bootstrap_n": n,
        "level": level,
        "seed": seed,
        "n_candidates": len(cs),
        "n_exams": cs.n_exams,
        "n_images": len(cs.image_exam),
        "n_lesions": len(cs.lesion_exam),
    }


def roc_frame(scores: np.ndarray, positive: np.ndarray) -> pd.DataFrame:
    """ROC curve points as ``threshold, fpr, tpr``."""
    fpr, tpr, thresholds = sk_metrics.roc_curve(np.asarray(positive, dtype=int), scores, drop_intermediate=False)
    return pd.DataFrame({"threshold": thresholds, "fpr": fpr, "tpr": tpr})


__all__ = [
    "CPM_OPERATING_POINTS",
    "CandidateSet",
    "FrocCurve",
    "LesionRef",
    "ScoredCandidate",
    "auc_from_scores",
    "bootstrap_ci",
    "bootstrap_pvalue",
    "cpm",
    "evaluate_models",
    "froc",
    "froc_from_set",
    "roc_auc",
    "roc_frame",
]
