"""Binary tensor format.

Layout (all integers little-endian)::

    magic   4 bytes  b"SSTN"
    dtype   u8       tag from DTYPE_TAGS
    rank    u8
    extents rank x u64
    data    product(extents) elements, little-endian
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"SSTN"
DTYPE_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<u1"): 4,
}
_TAG_DTYPES = {tag: dt for dt, tag in DTYPE_TAGS.items()}


class SerializationError(ValueError):
    pass


def write_array(stream, array: np.ndarray) -> None:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_TAGS:
        raise SerializationError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise SerializationError("rank exceeds 255")
    stream.write(MAGIC)
    stream.write(struct.pack("<BB", DTYPE_TAGS[dt], arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_exact(stream, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise SerializationError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_array(stream) -> np.ndarray:
    magic = _read_exact(stream, 4)
    if magic != MAGIC:
        raise SerializationError(f"bad tensor magic {magic!r}")
    tag, rank = struct.unpack("<BB", _read_exact(stream, 2))
    if tag not in _TAG_DTYPES:
        raise SerializationError(f"unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag]
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = _read_exact(stream, count * dt.itemsize)
    return np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def dumps(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_array(buf, array)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    return read_array(io.BytesIO(data))
