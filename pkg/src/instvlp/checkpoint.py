"""Checkpoint container.

Layout: b"ECLP", u16 format version, u64 header length, UTF-8 JSON header
(sorted keys), the named float64 tensors back to back in header order, and
a trailing u32 CRC-32 over everything before it.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"ECLP"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    names = sorted(tensors)
    index = [[n, list(np.shape(tensors[n]))] for n in names]
    head = json.dumps({"meta": header, "tensors": index}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HQ", FORMAT_VERSION, len(head)), head]
    parts += [np.ascontiguousarray(tensors[n], dtype="<f8").tobytes() for n in names]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 18 or buf[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HQ", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointFormatError("checkpoint is truncated or corrupted (CRC mismatch)")
    off = 14
    try:
        head = json.loads(buf[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint header: {exc}") from None
    off += hlen
    tensors = {}
    for name, shape in head["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(buf) - 4:
            raise CheckpointFormatError(f"checkpoint truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(buf[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
    if off != len(buf) - 4:
        raise CheckpointFormatError("trailing bytes after tensor payload")
    return head["meta"], tensors


def save_checkpoint(header: dict, tensors: dict, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(header, tensors))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
