"""Exception hierarchy for symmetry-cad."""

from __future__ import annotations

from singer_sdk.exceptions import ConfigValidationError


class SymmetryCadError(Exception):
    """Base class for every error raised by the pipeline."""


class PipelineConfigError(SymmetryCadError, ConfigValidationError):
    """Raised when the pipeline config is missing keys or holds illegal values.

    Attributes:
        key: Dotted config key the failure refers to (``"phantom.seed"``).
    """

    def __init__(self, message: str, key: str | None = None) -> None:
        """Create the error.

        Args:
            message: Human readable description, naming the key.
            key: Dotted key that failed validation, if known.
        """
        super().__init__(message)
        self.key = key


class PhantomConfigError(SymmetryCadError, ValueError):
    """Raised for an invalid phantom configuration; the message names the field."""

    def __init__(self, field: str, message: str) -> None:
        """Create the error for ``field``."""
        super().__init__(f"{field}: {message}")
        self.field = field


class ShapeMismatchError(SymmetryCadError, ValueError):
    """Raised when arrays or parameter sets do not have the expected shapes."""


class NonFiniteError(SymmetryCadError, FloatingPointError):
    """Raised when a NaN or Inf shows up in an image, activation or gradient."""

    def __init__(self, where: str, message: str = "non-finite values") -> None:
        """Create the error for the op or layer named ``where``."""
        super().__init__(f"{where}: {message}")
        self.where = where


class InsufficientDataError(SymmetryCadError, ValueError):
    """Raised when a stage receives too little data to satisfy its contract."""


class UndefinedMetricError(SymmetryCadError, ValueError):
    """Raised when a metric is undefined for the given data (e.g. one class only)."""


class SchemaVersionError(SymmetryCadError):
    """Raised when an artifact was written with an incompatible schema version."""

    def __init__(self, path: str, found: object, expected: int) -> None:
        """Create the error for the artifact at ``path``."""
        super().__init__(
            f"{path}: schema_version {found!r} does not match {expected}; "
            "migration required (re-run the producing stage)"
        )
        self.path = path
        self.found = found
        self.expected = expected
