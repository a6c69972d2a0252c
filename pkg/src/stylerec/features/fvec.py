"""FVEC1 feature files and their JSON Lines id index.

Layout: 5-byte magic ``FVEC1``, u32 LE dimension, u64 LE row count, then
row-major float32 LE values. The sidecar ``<file>.ids.jsonl`` holds one
``{"row": n, "id": "..."}`` object per row.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"FVEC1"
_HEADER = struct.Struct("<5sIQ")


class FeatureFileError(ValueError):
    pass


@dataclass
class FeatureChannel:
    """A named family of equal-length vectors keyed by record id."""

    name: str
    dim: int
    ids: list[str]
    matrix: np.ndarray  # (len(ids), dim)
    _row: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix)
        if self.dim < 1:
            raise ValueError("channel dimension must be positive")
        if self.matrix.shape != (len(self.ids), self.dim):
            raise ValueError(
                f"channel {self.name!r}: matrix shape {self.matrix.shape} does not match "
                f"{len(self.ids)} ids x dim {self.dim}"
            )
        self._row = {i: n for n, i in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise ValueError(f"channel {self.name!r} has duplicate ids")

    def __contains__(self, rid: str) -> bool:
        return rid in self._row

    def __len__(self) -> int:
        return len(self.ids)

    def vector(self, rid: str) -> np.ndarray:
        return self.matrix[self._row[rid]]

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        missing = [i for i in ids if i not in self._row]
        if missing:
            raise KeyError(f"channel {self.name!r} lacks ids {missing[:5]}{'...' if len(missing) > 5 else ''}")
        return self.matrix[[self._row[i] for i in ids]]


def index_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".ids.jsonl")


def channel_name_for(path: str | os.PathLike) -> str:
    name = Path(path).name
    return name[: -len(".fvec")] if name.endswith(".fvec") else Path(path).stem


def write_fvec(path: str | os.PathLike, ids: Sequence[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError("matrix must be (len(ids), dim)")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("refusing to write non-finite feature values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, matrix.shape[1], matrix.shape[0]))
        fh.write(np.ascontiguousarray(matrix).tobytes())
    with open(index_path(path), "w", encoding="utf-8", newline="\n") as fh:
        for n, rid in enumerate(ids):
            fh.write(json.dumps({"row": n, "id": rid}, ensure_ascii=False) + "\n")


def _read_index(path: Path) -> list[str]:
    rows: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows[int(obj["row"])] = str(obj["id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise FeatureFileError(f"{path}:{lineno}: malformed index entry") from None
    if sorted(rows) != list(range(len(rows))):
        raise FeatureFileError(f"{path}: index rows are not 0..n-1")
    return [rows[i] for i in range(len(rows))]


def load_external_channel(path: str | os.PathLike, name: str | None = None) -> FeatureChannel:
    """Read an FVEC1 file plus its id index into a FeatureChannel."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FeatureFileError(f"{path}: truncated header")
        magic, dim, count = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}")
        payload = fh.read()
    if dim < 1:
        raise FeatureFileError(f"{path}: zero dimension")
    if len(payload) != 4 * dim * count:
        raise FeatureFileError(f"{path}: payload holds {len(payload)} bytes, expected {4 * dim * count}")
    ids = _read_index(index_path(path))
    if len(ids) != count:
        raise FeatureFileError(f"{path}: header declares {count} rows but index lists {len(ids)} ids")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float64)
    if not np.all(np.isfinite(matrix)):
        raise FeatureFileError(f"{path}: non-finite values")
    return FeatureChannel(name or channel_name_for(path), dim, ids, matrix)
