"""EvalMetricsStream module."""

from __future__ import annotations

import typing as t

from singer_sdk import typing as th

from symmetry_cad.client import ArtifactStream
from symmetry_cad.evaluation import REPORT_SCHEMA_VERSION
from symmetry_cad.io import read_json_artifact

if t.TYPE_CHECKING:
    from singer_sdk.helpers.types import Context

METRICS = ("auc", "cpm_image", "cpm_exam")


class EvalMetricsStream(ArtifactStream):
    """Metric values of the evaluation report, one record per (model, metric).

    Comparisons appear as models named ``<challenger>_vs_<reference>`` whose
    values are one-sided bootstrap p-values.
    """

    name = "eval_metrics"
    primary_keys: t.ClassVar[list[str]] = ["model", "metric"]
    replication_key = None

    schema = th.PropertiesList(
        th.Property("model", th.StringType, required=True),
        th.Property("metric", th.StringType, required=True),
        th.Property("value", th.NumberType),
        th.Property("ci_lower", th.NumberType),
        th.Property("ci_upper", th.NumberType),
        th.Property("bootstrap_n", th.IntegerType),
    ).to_dict()

    def get_records(self, context: Context | None) -> t.Iterable[dict]:
        for path in self.artifact_paths("eval/report.json"):
            report = read_json_artifact(path, REPORT_SCHEMA_VERSION)
            n = report.get("bootstrap_n")
            for model, entry in sorted(report["models"].items()):
                for metric in METRICS:
                    lower, upper = entry[f"{metric}_ci"]
                    yield {
                        "model": model,
                        "metric": metric,
                        "value": entry[metric],
                        "ci_lower": lower,
                        "ci_upper": upper,
                        "bootstrap_n": n,
                    }
                if entry.get("auc_missing_contralateral") is not None:
                    yield {
                        "model": model,
                        "metric": "auc_missing_contralateral",
                        "value": entry["auc_missing_contralateral"],
                        "ci_lower": None,
                        "ci_upper": None,
                        "bootstrap_n": None,
                    }
            for comparison, values in sorted(report.get("p_values", {}).items()):
                for metric, value in sorted(values.items()):
                    yield {
                        "model": comparison,
                        "metric": f"p_{metric}",
                        "value": value,
                        "ci_lower": None,
                        "ci_upper": None,
                        "bootstrap_n": n,
                    }
