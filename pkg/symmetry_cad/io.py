"""Artifact helpers shared by the pipeline stages.

Every artifact records a ``schema_version`` and a provenance block
``{config_hash, seed, tool_version}``; readers refuse other versions.
"""

from __future__ import annotations

import hashlib
import json
import typing as t
from pathlib import Path

import pandas as pd

from symmetry_cad.exceptions import SchemaVersionError

TOOL_VERSION = "0.1.0"


def config_hash(config: t.Mapping[str, t.Any]) -> str:
    """SHA-256 of the canonical JSON form of a validated config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def provenance(config: t.Mapping[str, t.Any], seed: int) -> dict[str, t.Any]:
    """Provenance block embedded in every output file."""
    return {"config_hash": config_hash(config), "seed": int(seed), "tool_version": TOOL_VERSION}


def write_json_artifact(path: Path, payload: t.Mapping[str, t.Any], schema_version: int) -> None:
    """Write ``payload`` as deterministic JSON tagged with ``schema_version``."""
    document = {"schema_version": schema_version, **payload}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json_artifact(path: Path, schema_version: int) -> dict[str, t.Any]:
    """Read a JSON artifact, checking its schema version."""
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    if document.get("schema_version") != schema_version:
        raise SchemaVersionError(str(path), document.get("schema_version"), schema_version)
    return document


def write_csv_artifact(
    path: Path,
    frame: pd.DataFrame,
    schema_version: int,
    provenance_block: t.Mapping[str, t.Any],
) -> None:
    """Write ``frame`` as CSV behind a single ``#`` provenance line."""
    fields = {"schema_version": schema_version, **provenance_block}
    header = "# " + " ".join(f"{k}={v}" for k, v in fields.items()) + "\n"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write(header)
        frame.to_csv(fh, index=False, lineterminator="\n", float_format="%.17g")


def read_csv_header(path: Path) -> dict[str, str]:
    """Parse the ``#`` provenance line of a CSV artifact."""
    with Path(path).open(encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return {}
    return dict(item.split("=", 1) for item in first[1:].split() if "=" in item)


def read_csv_artifact(path: Path, schema_version: int) -> pd.DataFrame:
    """Read a CSV artifact written by :func:`write_csv_artifact`."""
    header = read_csv_header(path)
    found = header.get("schema_version")
    if found is None or int(found) != schema_version:
        raise SchemaVersionError(str(path), found, schema_version)
    return pd.read_csv(path, skiprows=1)
