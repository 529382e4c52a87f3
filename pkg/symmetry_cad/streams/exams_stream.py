"""ExamsStream module."""

from __future__ import annotations

import typing as t

from singer_sdk import typing as th

from symmetry_cad.client import ArtifactStream
from symmetry_cad.phantom import load_manifest

if t.TYPE_CHECKING:
    from singer_sdk.helpers.types import Context


class ExamsStream(ArtifactStream):
    """One record per exam of the synthetic archive."""

    name = "exams"
    primary_keys: t.ClassVar[list[str]] = ["exam_id"]
    replication_key = None

    schema = th.PropertiesList(
        th.Property("exam_id", th.StringType, required=True, description="Exam identifier"),
        th.Property("patient_id", th.StringType, description="Patient identifier"),
        th.Property("vendor", th.StringType, description="Scanner vendor tag"),
        th.Property("label", th.StringType, description="normal or malignant"),
        th.Property("split", th.StringType, description="train, val or test"),
        th.Property("missing_laterality", th.StringType, description="Breast not imaged, if any"),
        th.Property("n_images", th.IntegerType),
        th.Property("n_lesions", th.IntegerType, description="Distinct masses in the exam"),
    ).to_dict()

    def get_records(self, context: Context | None) -> t.Iterable[dict]:
        for path in self.artifact_paths("dataset/manifest.json"):
            manifest = load_manifest(path)
            for exam in manifest.exams:
                yield {
                    "exam_id": exam.exam_id,
                    "patient_id": exam.patient_id,
                    "vendor": exam.vendor,
                    "label": exam.label,
                    "split": exam.split,
                    "missing_laterality": exam.missing_laterality,
                    "n_images": len(exam.images),
                    "n_lesions": len({les.lesion_id for img in exam.images for les in img.lesions}),
                }
