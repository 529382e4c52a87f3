"""Checkpoint files: a JSON header followed by a float32 parameter blob.

Layout::

    b"SCADCKPT" | uint32 LE header length | header JSON (utf-8) | blob

The header holds the network spec, epoch, validation AUC, provenance and
an offset table ``[{name, shape, offset, count}]`` into the blob (offsets
in float32 elements).
"""

from __future__ import annotations

import json
import logging
import math
import struct
import typing as t
from pathlib import Path

import numpy as np

from symmetry_cad.exceptions import SchemaVersionError
from symmetry_cad.nnet.network import NetworkSpec, Parameters, check_parameters, parameter_shapes

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
_MAGIC = b"SCADCKPT"


def save_checkpoint(
    path: Path,
    spec: NetworkSpec,
    params: Parameters,
    *,
    epoch: int,
    val_auc: float | None,
    provenance: t.Mapping[str, t.Any] | None = None,
) -> None:
    """Write ``params`` (cast to float32) with their spec."""
    check_parameters(spec, params)
    table = []
    offset = 0
    for name, shape in parameter_shapes(spec).items():
        count = math.prod(shape)
        table.append({"name": name, "shape": list(shape), "offset": offset, "count": count})
        offset += count
    header = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "spec": spec.to_dict(),
        "epoch": int(epoch),
        "val_auc": None if val_auc is None else float(val_auc),
        "provenance": dict(provenance or {}),
        "offsets": table,
        "dtype": "<f4",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = np.concatenate([params[entry["name"]].astype("<f4").ravel() for entry in table])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob.tobytes())
    logger.info("Saved checkpoint", extra={"path": str(path), "kind": spec.kind, "epoch": epoch})


def load_checkpoint(path: Path) -> tuple[NetworkSpec, Parameters, dict[str, t.Any]]:
    """Read a checkpoint.

    Returns:
        The spec, float32 parameters and the full header.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise SchemaVersionError(str(path), "unknown", CHECKPOINT_SCHEMA_VERSION)
    (length,) = struct.unpack("<I", raw[len(_MAGIC) : len(_MAGIC) + 4])
    start = len(_MAGIC) + 4
    header = json.loads(raw[start : start + length].decode("utf-8"))
    if header.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise SchemaVersionError(str(path), header.get("schema_version"), CHECKPOINT_SCHEMA_VERSION)
    blob = np.frombuffer(raw, dtype="<f4", offset=start + length)
    params = {
        entry["name"]: blob[entry["offset"] : entry["offset"] + entry["count"]]
        .reshape(entry["shape"])
        .astype(np.float32)
        for entry in header["offsets"]
    }
    spec = NetworkSpec.from_dict(header["spec"])
    check_parameters(spec, params)
    return spec, params, header
