"""CSV ingestion and export for datasets.

Flat files have a header row and one observation per line.  Longitudinal
files are in long form with columns ``subject_id, time_index, y, z_1..z_p``;
rows of a subject must be contiguous and sorted by ``time_index``.  Any
malformed row raises ``DataError`` naming the file and line.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .moments import DataError, Dataset

__all__ = ["ingest_csv", "write_csv"]


def _number(cell: str, path, lineno: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column {col!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}:{lineno}: non-finite value {cell!r} in column {col!r}")
    return value


def _read(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise DataError(f"{path}:1: missing header row")
    header = [h.strip() for h in rows[0]]
    body = [(i, row) for i, row in enumerate(rows[1:], 2) if any(cell.strip() for cell in row)]
    for lineno, row in body:
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)} (ragged row)")
    return path, header, body


def ingest_csv(path, layout: str = "flat") -> Dataset:
    """Read a flat or long-form longitudinal CSV file into a ``Dataset``."""
    if layout not in ("flat", "long"):
        raise ValueError(f"layout must be 'flat' or 'long', got {layout!r}")
    path, header, body = _read(path)
    if layout == "flat":
        values = np.array([[_number(c, path, ln, header[j]) for j, c in enumerate(row)]
                           for ln, row in body]).reshape(len(body), len(header))
        return Dataset.flat(values)
    if len(header) < 4:
        raise DataError(f"{path}:1: long form needs subject_id, time_index, y and at least one z column")
    subjects, ys, zs = [], [], []
    seen = set()
    last_time = None
    for lineno, row in body:
        sid = row[0].strip()
        t = _number(row[1], path, lineno, header[1])
        y = _number(row[2], path, lineno, header[2])
        z = [_number(c, path, lineno, header[j + 3]) for j, c in enumerate(row[3:])]
        if not subjects or sid != subjects[-1]:
            if sid in seen:
                raise DataError(f"{path}:{lineno}: rows of subject {sid!r} are not contiguous")
            seen.add(sid)
            subjects.append(sid)
            ys.append([])
            zs.append([])
        elif t <= last_time:
            raise DataError(f"{path}:{lineno}: time_index not increasing within subject {sid!r}")
        last_time = t
        ys[-1].append(y)
        zs[-1].append(z)
    return Dataset.grouped([np.array(v) for v in ys], [np.array(v) for v in zs], subjects)


def write_csv(data: Dataset, path) -> None:
    """Write ``data`` in the format ``ingest_csv`` reads; floats use ``repr`` so values round-trip exactly."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if data.layout == "flat":
            w.writerow([f"x{j + 1}" for j in range(data.rows.shape[1])])
            for row in data.rows:
                w.writerow([repr(float(v)) for v in row])
            return
        p = data.z[0].shape[1]
        w.writerow(["subject_id", "time_index", "y"] + [f"z_{k + 1}" for k in range(p)])
        for sid, yi, zi in zip(data.subject_ids, data.y, data.z):
            for t in range(len(yi)):
                w.writerow([sid, t + 1, repr(float(yi[t]))] + [repr(float(v)) for v in zi[t]])
