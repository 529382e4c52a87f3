"""Symmetry-aware mass detection pipeline for bilateral mammograms."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

from symmetry_cad.io import TOOL_VERSION

__version__ = TOOL_VERSION
__all__ = ["__version__", "configure_logging"]

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
NOISY_LOGGERS = ("matplotlib", "PIL", "joblib", "numba", "singer_sdk")


def configure_logging(log_dir: Path | None = None, level: int | str = logging.INFO) -> Path | None:
    """Log to stderr and, when ``log_dir`` is given, to ``log_dir/symmetry_cad.log``.

    Returns:
        The log file path, if any.
    """
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    log_file = None
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        log_file = Path(log_dir) / "symmetry_cad.log"
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)
    if log_file is not None:
        logging.getLogger(__name__).info("Logging initialized. Log file: %s", log_file.absolute())
    return log_file
