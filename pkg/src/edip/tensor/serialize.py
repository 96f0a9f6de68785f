"""Flat binary tensor format.

Layout (little-endian): ``b"EDIPT"``, u32 version, u32 rank, rank x u64 dims,
then the f64 payload in C order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"EDIPT"
VERSION = 1


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_tensor(path, array) -> None:
    with open(Path(path), "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(Path(path), "rb") as fh:
        return read_tensor(fh)
