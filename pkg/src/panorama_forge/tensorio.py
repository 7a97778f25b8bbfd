"""Reader/writer for the PNC1 binary tensor container.

Layout (all little-endian)::

    b"PNC1" | u32 ndim | ndim x u64 dims | row-major f32 payload
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"PNC1"

PathLike = Union[str, os.PathLike]


class TensorFormatError(ValueError):
    """Raised when a byte stream is not a well-formed PNC1 tensor."""


def dumps(array) -> bytes:
    buf = io.BytesIO()
    write(buf, array)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    arr = read(buf)
    if buf.read(1):
        raise TensorFormatError("trailing bytes after PNC1 payload")
    return arr


def write(fh: BinaryIO, array) -> None:
    if hasattr(array, "detach"):
        array = array.detach().cpu().numpy()
    arr = np.asarray(array, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise TensorFormatError("truncated header (ndim)")
    (ndim,) = struct.unpack("<I", raw)
    raw = fh.read(8 * ndim)
    if len(raw) != 8 * ndim:
        raise TensorFormatError("truncated header (dims)")
    shape = struct.unpack(f"<{ndim}Q", raw) if ndim else ()
    count = int(np.prod(shape, dtype=np.uint64)) if ndim else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise TensorFormatError(f"payload truncated: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save(path: PathLike, array) -> None:
    with open(path, "wb") as fh:
        write(fh, array)


def load(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read(fh)
        if fh.read(1):
            raise TensorFormatError(f"{path}: trailing bytes after PNC1 payload")
    return arr
