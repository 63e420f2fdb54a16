"""Named-array record framing shared by model and feature files.

Record: ``u32 name_len, name (utf-8), u32 rank, u32 dims[rank], f32 data``,
all little-endian.
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import ModelFormatError

_U32 = struct.Struct("<I")


def encode_block(name: str, arr) -> bytes:
    arr = np.asarray(arr)
    raw = name.encode("utf-8")
    head = _U32.pack(len(raw)) + raw + _U32.pack(arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_block(f, name: str, arr) -> None:
    f.write(encode_block(name, arr))


def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise ModelFormatError(f"truncated record: wanted {n} bytes, got {len(data)}")
    return data


def read_block(f):
    """Read one record from a binary stream; returns ``(name, float32 array)``."""
    (name_len,) = _U32.unpack(_read_exact(f, 4))
    try:
        name = _read_exact(f, name_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFormatError(f"record name is not utf-8: {exc}") from None
    (rank,) = _U32.unpack(_read_exact(f, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").astype(np.float32)
    return name, data.reshape(dims)


def read_blocks(f, end=None):
    """Read records until EOF (or until the stream position reaches ``end``)."""
    out = []
    while True:
        if end is not None and f.tell() >= end:
            break
        peek = f.read(1)
        if not peek:
            break
        f.seek(-1, 1)
        out.append(read_block(f))
    return out
