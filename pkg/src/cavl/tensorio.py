"""Binary tensor records shared by checkpoints and ROI files.

Layout (all integers little-endian)::

    magic    8 bytes   b"CAVLTNSR"
    version  u32       FORMAT_VERSION
    rank     u32
    extents  u64 * rank
    data     f64 * prod(extents), row-major, little-endian
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from .errors import MalformedFile

MAGIC = b"CAVLTNSR"
FORMAT_VERSION = 1
_F64 = np.dtype("<f8")


def write_tensor(fh: BinaryIO, array) -> int:
    """Write one record; returns the number of bytes written."""
    # np.require keeps rank 0, unlike ascontiguousarray
    array = np.require(np.asarray(array, dtype=_F64), requirements="C")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    fh.write(header)
    fh.write(array.tobytes(order="C"))
    return len(header) + array.nbytes


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise MalformedFile(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 8)
    if magic != MAGIC:
        raise MalformedFile(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != FORMAT_VERSION:
        raise MalformedFile(f"unsupported tensor format version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype=_F64)
    return data.astype(np.float64).reshape(shape)


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    buf = io.BytesIO(raw)
    out = read_tensor(buf)
    if buf.read(1):
        raise MalformedFile("trailing bytes after tensor record")
    return out


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
