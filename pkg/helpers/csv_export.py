"""
CSV / manifest writers for run artifacts.

Every float is printed with 17 significant digits so a CSV read back gives the
exact float64 it was written from; identical runs therefore produce
byte-identical files.
"""
from __future__ import annotations

import json
import math
import warnings
from logging import getLogger
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from config import CSV_FLOAT_FORMAT
from lib.errors import ConfigValidationError
from lib.model import DensityField

logger = getLogger(__name__)


def format_float(x: float) -> str:
    return format(float(x), CSV_FLOAT_FORMAT)


def _format_cell(x: Any) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format_float(x)


def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_cell(x) for x in row))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug("[CSV] wrote %d rows to %s", len(lines) - 1, path)
    return path


def write_columns(path: Path, columns: Mapping[str, Optional[np.ndarray]]) -> Path:
    """Write equal-length columns; a None column is written as nan."""
    length = max(len(c) for c in columns.values() if c is not None)
    filled = [np.full(length, np.nan) if c is None else np.asarray(c, dtype=float) for c in columns.values()]
    return write_rows(path, list(columns), zip(*filled))


def write_profile(path: Path, density: DensityField) -> Path:
    """Profile CSV with header v,n (cell centers and averages)."""
    return write_rows(path, ["v", "n"], zip(density.grid.centers, density.values))


def _as_float(field: str) -> float:
    return float(field) if field.strip() else math.nan


def read_columns(path: Path) -> dict[str, np.ndarray]:
    """
    Read a headed numeric CSV into named columns.

    Quoted fields and a leading BOM are accepted; an empty field reads as nan.
    """
    if not path.exists():
        raise ConfigValidationError([f"file not found: {path}"])
    options = dict(delimiter=",", quotechar='"', encoding="utf-8-sig")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            header = [h.strip() for h in np.loadtxt(path, dtype=str, max_rows=1, ndmin=1, **options)]
            data = np.loadtxt(path, skiprows=1, ndmin=2, converters=_as_float, **options)
    except (ValueError, TypeError) as exc:
        raise ConfigValidationError([f"{path.name}: {exc}"]) from exc
    if data.size == 0:
        raise ConfigValidationError([f"{path.name}: needs a header and at least one row"])
    if data.shape[1] != len(header):
        raise ConfigValidationError([f"{path.name}: {data.shape[1]} values per row, {len(header)} header fields"])
    return {name: data[:, k] for k, name in enumerate(header)}


def write_manifest(path: Path, manifest: Mapping[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_summary(path: Path, title: str, metrics: Mapping[str, str]) -> Path:
    """Plain-text key/value summary, one metric per line."""
    width = max([len(k) for k in metrics] + [8])
    lines = [title, "=" * len(title)]
    lines += [f"{k:<{width}}  {v}" for k, v in metrics.items()]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
