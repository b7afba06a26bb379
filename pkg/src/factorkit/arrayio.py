"""Binary array file format (FKT1).

Layout: magic b"FKT1", little-endian u32 rows, u32 cols, u8 dtype tag
(0 = float64, 1 = float32), then the row-major payload with no padding.
float32 payloads are widened to float64 on read; everything in memory is
float64. Write-then-read round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import as_matrix

MAGIC = b"FKT1"
_HEADER = struct.Struct("<4sIIB")
DTYPE_F64 = 0
DTYPE_F32 = 1


class FormatError(ValueError):
    """Malformed array file; ``offset`` is the byte position of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_array(path, w: np.ndarray, *, dtype: str = "f64"):
    """Write a matrix; dtype "f32" narrows the payload at the file boundary."""
    w = as_matrix(w)
    if dtype == "f64":
        tag, payload = DTYPE_F64, w
    elif dtype == "f32":
        tag, payload = DTYPE_F32, w.astype(np.float32)
    else:
        raise ValueError(f"unsupported dtype {dtype!r}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, w.shape[0], w.shape[1], tag))
        fh.write(payload.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    """Read a matrix, validating header, payload length, and finiteness."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(raw)} bytes)", len(raw))
    magic, rows, cols, tag = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if rows < 1 or cols < 1:
        raise FormatError(f"non-positive shape {rows}x{cols}", 4)
    if tag == DTYPE_F64:
        dt = np.dtype("<f8")
    elif tag == DTYPE_F32:
        dt = np.dtype("<f4")
    else:
        raise FormatError(f"unsupported dtype tag {tag}", 12)
    expected = rows * cols * dt.itemsize
    body = raw[_HEADER.size :]
    if len(body) != expected:
        raise FormatError(
            f"payload is {len(body)} bytes, expected {expected} for {rows}x{cols}",
            _HEADER.size + min(len(body), expected),
        )
    a = np.frombuffer(body, dtype=dt).astype(np.float64).reshape(rows, cols)
    bad = np.flatnonzero(~np.isfinite(a))
    if bad.size:
        raise FormatError(
            f"non-finite element at flat index {bad[0]}",
            _HEADER.size + int(bad[0]) * dt.itemsize,
        )
    return a
