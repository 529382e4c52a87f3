"""Streams of the artifact export tap."""

from __future__ import annotations

from .candidates_stream import CandidatesStream
from .eval_metrics_stream import EvalMetricsStream
from .exams_stream import ExamsStream
from .training_log_stream import TrainingLogStream

__all__ = [
    "CandidatesStream",
    "EvalMetricsStream",
    "ExamsStream",
    "TrainingLogStream",
]
