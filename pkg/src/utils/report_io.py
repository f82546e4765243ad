"""
Report writers for the SPAD array / QKD link simulator.

JSON and RFC-4180 CSV emitters with stable formatting, so reruns with the
same seed produce byte-identical files. Every writer logs and returns the
SHA-256 digest of what it wrote.
"""

import csv
import hashlib
import json
import logging
import math
import os
from typing import Any, Iterable, List, Sequence

import numpy as np


class _DigestSink:
    """UTF-8 text sink that hashes exactly the bytes it puts on disk."""

    def __init__(self, handle):
        self._handle = handle
        self._sha = hashlib.sha256()

    def write(self, text: str) -> int:
        data = text.encode("utf-8")
        self._sha.update(data)
        self._handle.write(data)
        return len(text)

    @property
    def digest(self) -> str:
        return self._sha.hexdigest()


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and non-finite floats to plain JSON values."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def format_cell(value: Any) -> str:
    """Render one CSV cell; floats use repr precision so files are exact."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_json(path: str, payload: Any) -> str:
    """Write `payload` as sorted, indented UTF-8 JSON; returns the SHA-256 digest."""
    _ensure_parent(path)
    with open(path, "wb") as f:
        sink = _DigestSink(f)
        json.dump(to_jsonable(payload), sink, indent=2, sort_keys=True, allow_nan=False)
        sink.write("\n")
    digest = sink.digest
    logging.info(f"Wrote {path} (sha256 {digest[:16]})")
    return digest


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Write an RFC-4180 CSV with CRLF line endings; returns the SHA-256 digest."""
    _ensure_parent(path)
    with open(path, "wb") as f:
        sink = _DigestSink(f)
        writer = csv.writer(sink, lineterminator="\r\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    digest = sink.digest
    logging.info(f"Wrote {path} (sha256 {digest[:16]})")
    return digest


def write_matrix_csv(path: str, matrix, label: str = "pixel") -> str:
    """Square matrix as CSV with a leading row-label column."""
    matrix = np.asarray(matrix)
    n_cols = matrix.shape[1] if matrix.ndim == 2 else 0
    header = [label] + [f"{label}_{j}" for j in range(n_cols)]
    rows = ([i] + list(row) for i, row in enumerate(matrix))
    return write_csv(path, header, rows)


def read_csv_rows(path: str) -> List[dict]:
    """Read a CSV with a header row into dicts (utf-8, BOM tolerated)."""
    with open(path, "r", encoding="utf-8-sig", newline="") as f:
        return list(csv.DictReader(f))
