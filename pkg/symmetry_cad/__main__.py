"""symmetry-cad entry point."""

from __future__ import annotations

from symmetry_cad.cli import cli

cli()
