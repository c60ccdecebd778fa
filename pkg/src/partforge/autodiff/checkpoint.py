"""Named parameter tables with a content checksum (``.pfck``)."""
from __future__ import annotations

import hashlib
import struct
from typing import Mapping

import numpy as np

from ..voxelgrid import GridFormatError, atomic_write_bytes

MAGIC = b"PFCK"
VERSION = 1
_HEAD = struct.Struct("<4sB3xI")
_DIGEST = 32


class CheckpointError(GridFormatError):
    pass


def table_to_bytes(table: Mapping[str, np.ndarray]) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, len(table))]
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<HB", len(key), arr.ndim) + key)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def table_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < _HEAD.size + _DIGEST:
        raise CheckpointError("truncated checkpoint", len(data))
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch", len(body))
    magic, version, count = _HEAD.unpack_from(body, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    pos = _HEAD.size
    table = {}
    for _ in range(count):
        klen, ndim = struct.unpack_from("<HB", body, pos)
        pos += 3
        name = body[pos : pos + klen].decode()
        pos += klen
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if pos + 4 * n > len(body):
            raise CheckpointError(f"truncated tensor {name!r}", pos)
        table[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes", pos)
    return table


def save_table(table: Mapping[str, np.ndarray], path) -> None:
    atomic_write_bytes(path, table_to_bytes(table))


def load_table(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return table_from_bytes(fh.read())
