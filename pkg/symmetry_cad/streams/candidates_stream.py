"""CandidatesStream module."""

from __future__ import annotations

import typing as t

from singer_sdk import typing as th

from symmetry_cad.candidates import read_candidates
from symmetry_cad.client import ArtifactStream

if t.TYPE_CHECKING:
    from singer_sdk.helpers.types import Context


class CandidatesStream(ArtifactStream):
    """Detected candidates of every split."""

    name = "candidates"
    primary_keys: t.ClassVar[list[str]] = ["image_id", "row", "col"]
    replication_key = None

    schema = th.PropertiesList(
        th.Property("exam_id", th.StringType),
        th.Property("image_id", th.StringType, required=True),
        th.Property("row", th.IntegerType, required=True),
        th.Property("col", th.IntegerType, required=True),
        th.Property("score", th.NumberType, description="Mass likelihood at the candidate"),
        th.Property("label", th.StringType, description="positive or negative"),
        th.Property("lesion_id", th.StringType, description="Lesion hit by a positive candidate"),
        th.Property("split", th.StringType),
    ).to_dict()

    def get_records(self, context: Context | None) -> t.Iterable[dict]:
        for path in self.artifact_paths("candidates/*.csv"):
            frame = read_candidates(path)
            for row in frame.itertuples(index=False):
                yield {
                    "exam_id": str(row.exam_id),
                    "image_id": str(row.image_id),
                    "row": int(row.row),
                    "col": int(row.col),
                    "score": float(row.score),
                    "label": str(row.label),
                    "lesion_id": row.lesion_id,
                    "split": str(row.split),
                }
