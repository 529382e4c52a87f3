"""TrainingLogStream module."""

from __future__ import annotations

import typing as t

from singer_sdk import typing as th

from symmetry_cad.client import ArtifactStream
from symmetry_cad.trainer import read_training_log

if t.TYPE_CHECKING:
    from singer_sdk.helpers.types import Context


class TrainingLogStream(ArtifactStream):
    """Per-epoch training records of every model."""

    name = "training_log"
    primary_keys: t.ClassVar[list[str]] = ["kind", "epoch"]
    replication_key = None

    schema = th.PropertiesList(
        th.Property("kind", th.StringType, required=True, description="baseline or symmetry"),
        th.Property("epoch", th.IntegerType, required=True),
        th.Property("mean_loss", th.NumberType),
        th.Property("lr_last", th.NumberType, description="Learning rate of the epoch's last update"),
        th.Property("val_auc", th.NumberType),
        th.Property("best_so_far", th.NumberType),
    ).to_dict()

    def get_records(self, context: Context | None) -> t.Iterable[dict]:
        for path in self.artifact_paths("models/*_log.ndjson"):
            header, records = read_training_log(path)
            for record in records:
                yield {"kind": header["kind"], **record.to_dict()}
