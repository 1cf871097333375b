"""Binary embedding container and JSONL label sidecar.

Embedding file, all little-endian::

    magic "EFEM" | u32 version=1 | u32 D | u64 count
    count x (u64 record_id | u64 polyp_id | u32 view_id | i32 label | D x f32)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"EFEM"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class FormatError(ValueError):
    """Malformed input; ``offset`` is the first byte that could not be accepted."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


def record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [
            ("record_id", "<u8"),
            ("polyp_id", "<u8"),
            ("view_id", "<u4"),
            ("label", "<i4"),
            ("values", "<f4", (dim,)),
        ]
    )


@dataclass(frozen=True)
class EmbeddingTable:
    dim: int
    rows: np.ndarray  # structured array with record_dtype(dim)

    def __len__(self):
        return len(self.rows)


def encode_embeddings(record_ids, polyp_ids, view_ids, labels, values) -> bytes:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError("values must be a (count, D) matrix")
    count, dim = values.shape
    rows = np.zeros(count, dtype=record_dtype(dim))
    rows["record_id"] = record_ids
    rows["polyp_id"] = polyp_ids
    rows["view_id"] = view_ids
    rows["label"] = labels
    rows["values"] = values
    return _HEADER.pack(MAGIC, VERSION, dim, count) + rows.tobytes()


def write_embeddings(path, record_ids, polyp_ids, view_ids, labels, values) -> int:
    payload = encode_embeddings(record_ids, polyp_ids, view_ids, labels, values)
    with open(path, "wb") as fh:
        fh.write(payload)
    return len(payload)


def decode_embeddings(data: bytes) -> EmbeddingTable:
    if len(data) < _HEADER.size:
        raise FormatError("truncated embedding header", len(data))
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dim < 1:
        raise FormatError("dimension must be positive", 8)
    dtype = record_dtype(dim)
    expected = _HEADER.size + count * dtype.itemsize
    if len(data) < expected:
        whole = (len(data) - _HEADER.size) // dtype.itemsize
        raise FormatError(
            f"header declares {count} records but payload holds {whole} complete records",
            _HEADER.size + whole * dtype.itemsize,
        )
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after {count} records", expected)
    rows = np.frombuffer(data, dtype=dtype, count=count, offset=_HEADER.size)
    finite = np.isfinite(rows["values"]).all(axis=1) if count else np.ones(0, bool)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise FormatError(f"non-finite values in record {bad}", _HEADER.size + bad * dtype.itemsize)
    return EmbeddingTable(dim, rows)


def read_embeddings(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        return decode_embeddings(fh.read())


def read_label_sidecar(path) -> dict[int, int]:
    """Parse ``{"polyp_id": .., "label": ..}`` lines; later lines override earlier ones."""
    labels = {}
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.strip()
            if line:
                try:
                    obj = json.loads(line)
                    polyp, label = obj["polyp_id"], obj["label"]
                except (ValueError, KeyError, TypeError) as exc:
                    raise FormatError(f"bad label line: {exc}", offset) from None
                if not isinstance(polyp, int) or isinstance(polyp, bool) or polyp < 0:
                    raise FormatError(f"polyp_id must be a non-negative integer, got {polyp!r}", offset)
                if not isinstance(label, int) or isinstance(label, bool):
                    raise FormatError(f"label must be an integer, got {label!r}", offset)
                labels[polyp] = label
            offset += len(raw)
    return labels
