"""Base stream reading records from a pipeline output directory."""

from __future__ import annotations

import typing as t
from pathlib import Path

from singer_sdk.streams import Stream

if t.TYPE_CHECKING:
    from singer_sdk.helpers.types import Context


class ArtifactStream(Stream):
    """Stream over one kind of artifact under ``artifacts_dir``."""

    @property
    def artifacts_dir(self) -> Path:
        """Root directory of the pipeline run, from the tap settings."""
        return Path(self.config["artifacts_dir"])

    def artifact_paths(self, pattern: str) -> list[Path]:
        """Sorted artifacts matching ``pattern`` (relative to the root)."""
        paths = sorted(self.artifacts_dir.glob(pattern))
        if not paths:
            self.logger.warning("No artifacts match %s under %s", pattern, self.artifacts_dir)
        return paths

    def get_records(self, context: Context | None) -> t.Iterable[dict]:
        """Yield records; subclasses read their artifact."""
        raise NotImplementedError
