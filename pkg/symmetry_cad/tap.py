"""Singer tap exporting pipeline artifacts."""

from __future__ import annotations

from singer_sdk import Tap
from singer_sdk import typing as th  # JSON schema typing helpers

from symmetry_cad.client import ArtifactStream
from symmetry_cad.streams import (
    CandidatesStream,
    EvalMetricsStream,
    ExamsStream,
    TrainingLogStream,
)


class TapSymmetryCad(Tap):
    """Reads a pipeline run directory and emits its exams, candidates, training logs and metrics."""

    name = "tap-symmetry-cad"

    config_jsonschema = th.PropertiesList(
        th.Property(
            "artifacts_dir",
            th.StringType(nullable=False),
            required=True,
            title="Artifacts directory",
            description="Output directory of a symmetry-cad run (its run.out_dir)",
        ),
    ).to_dict()

    def discover_streams(self) -> list[ArtifactStream]:
        """Return a list of discovered streams.

        Returns:
            A list of discovered streams.
        """
        streams_list = [
            ExamsStream,
            CandidatesStream,
            TrainingLogStream,
            EvalMetricsStream,
        ]
        return [stream(self) for stream in streams_list]


if __name__ == "__main__":
    TapSymmetryCad.cli()
