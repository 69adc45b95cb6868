"""Binary tensor dump: b"ETNS", u16 version, u16 rank, u64 dims, <f8 payload."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ETNS"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f8")
    head = MAGIC + struct.pack("<HH", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TensorFormatError("not an ETNS tensor (bad magic)")
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported ETNS version {version}")
    off = 8 + 8 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated ETNS header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 8 * count:
        raise TensorFormatError(f"ETNS payload size mismatch: expected {8 * count} bytes, got {len(buf) - off}")
    return np.frombuffer(buf, dtype="<f8", offset=off, count=count).astype(np.float64).reshape(dims)


def save(path, array) -> None:
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
