"""Tests standard tap features using the built-in SDK tests library."""

from __future__ import annotations

import tempfile
from pathlib import Path

import pytest
from singer_sdk.exceptions import ConfigValidationError
from singer_sdk.testing import get_tap_test_class

from symmetry_cad.candidates import Candidate, candidates_frame, write_candidates
from symmetry_cad.evaluation import REPORT_SCHEMA_VERSION
from symmetry_cad.io import write_json_artifact
from symmetry_cad.phantom import PhantomConfig, assign_splits, generate_dataset, split_dataset
from symmetry_cad.tap import TapSymmetryCad
from symmetry_cad.trainer import EpochRecord, TrainingLog

PROVENANCE = {"config_hash": "abc", "seed": 0, "tool_version": "0.1.0"}


def build_artifacts(root: Path) -> Path:
    """Write a minimal run directory with one artifact of every exported kind."""
    config = PhantomConfig(
        n_exams=6,
        image_height_px=200,
        image_width_px=150,
        pixel_spacing_cm=0.04,
        mass_radius_range_cm=(0.3, 0.5),
        malignant_fraction=0.5,
        repeat_patient_fraction=0.0,
        seed=1,
    )
    manifest = generate_dataset(config)
    manifest = assign_splits(manifest, *split_dataset(manifest, seed=1))
    (root / "dataset").mkdir(parents=True, exist_ok=True)
    (root / "dataset" / "manifest.json").write_text(manifest.to_json())

    cands = [
        Candidate((10, 12), 0.75, "positive", "E00000_L_CC", "E00000", "E00000_M0"),
        Candidate((40, 44), 0.25, "negative", "E00000_L_CC", "E00000", None),
    ]
    write_candidates(root / "candidates" / "test.csv", candidates_frame(cands, split="test"), PROVENANCE)

    for kind in ("baseline", "symmetry"):
        log = TrainingLog(root / "models" / f"{kind}_log.ndjson", kind=kind, provenance=PROVENANCE)
        log.write(EpochRecord(1, 0.69, 0.01, 0.61, 0.61))
        log.write(EpochRecord(2, 0.52, 0.0099, 0.66, 0.66))

    entry = {
        "auc": 0.8,
        "auc_ci": [0.7, 0.9],
        "cpm_image": 0.5,
        "cpm_image_ci": [0.4, 0.6],
        "cpm_exam": 0.6,
        "cpm_exam_ci": [0.5, 0.7],
        "auc_missing_contralateral": None,
        "n_missing_contralateral": 0,
    }
    report = {
        "provenance": PROVENANCE,
        "models": {"baseline": entry, "symmetry": {**entry, "auc": 0.85, "auc_missing_contralateral": 0.75}},
        "p_values": {"symmetry_vs_baseline": {"auc": 0.03, "cpm_image": 0.2, "cpm_exam": 0.1}},
        "bootstrap_n": 100,
        "level": 0.95,
        "seed": 0,
    }
    write_json_artifact(root / "eval" / "report.json", report, REPORT_SCHEMA_VERSION)
    return root


SAMPLE_CONFIG = {
    "artifacts_dir": str(build_artifacts(Path(tempfile.mkdtemp(prefix="symmetry-cad-")))),
}


# Run standard built-in tap tests from the SDK:
TestTapSymmetryCad = get_tap_test_class(
    tap_class=TapSymmetryCad,
    config=SAMPLE_CONFIG,
)


def _records(stream_name: str, config=SAMPLE_CONFIG) -> list[dict]:
    tap = TapSymmetryCad(config=config, parse_env_config=False)
    return list(tap.streams[stream_name].get_records(None))


def test_exams_stream_covers_the_manifest():
    records = _records("exams")

    assert [r["exam_id"] for r in records] == [f"E{i:05d}" for i in range(6)]
    assert {r["split"] for r in records} <= {"train", "val", "test"}
    assert sum(r["label"] == "malignant" for r in records) == 3
    assert all(r["n_lesions"] > 0 for r in records if r["label"] == "malignant")


def test_candidates_stream_keeps_missing_lesion_ids():
    records = _records("candidates")

    assert [(r["row"], r["col"], r["lesion_id"]) for r in records] == [(10, 12, "E00000_M0"), (40, 44, None)]
    assert {r["split"] for r in records} == {"test"}


def test_training_log_stream_tags_the_model():
    records = _records("training_log")

    assert [(r["kind"], r["epoch"]) for r in records] == [
        ("baseline", 1),
        ("baseline", 2),
        ("symmetry", 1),
        ("symmetry", 2),
    ]


def test_eval_metrics_stream_flattens_the_report():
    records = {(r["model"], r["metric"]): r for r in _records("eval_metrics")}

    assert records[("symmetry", "auc")]["value"] == 0.85
    assert records[("symmetry", "auc")]["ci_lower"] == 0.7
    assert ("baseline", "auc_missing_contralateral") not in records
    assert records[("symmetry", "auc_missing_contralateral")]["value"] == 0.75
    assert records[("symmetry_vs_baseline", "p_auc")]["value"] == 0.03
    assert len(records) == 3 + 4 + 3


def test_empty_directory_yields_nothing(tmp_path):
    assert _records("exams", {"artifacts_dir": str(tmp_path)}) == []


def test_artifacts_dir_is_required():
    with pytest.raises(ConfigValidationError):
        TapSymmetryCad(config={}, parse_env_config=False)
