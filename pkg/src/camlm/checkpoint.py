"""Binary checkpoint format.

Layout (all integers unsigned 64-bit little-endian)::

    b"CAMCKPT1"
    len(config) | config bytes (UTF-8)
    repeated until EOF:
        len(name) | name bytes (UTF-8) | rank | dims[rank] | float64 LE values
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"CAMCKPT1"
_U64 = struct.Struct("<Q")


class CheckpointError(IOError):
    pass


def _u64(n: int) -> bytes:
    return _U64.pack(n)


def dumps(config: str, arrays: Iterable[tuple[str, np.ndarray]]) -> bytes:
    out = [MAGIC]
    blob = config.encode("utf-8")
    out += [_u64(len(blob)), blob]
    for name, arr in arrays:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += [_u64(len(raw)), raw, _u64(arr.ndim)]
        out += [_u64(d) for d in arr.shape]
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def loads(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a CAM checkpoint (bad magic bytes)")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    def u64() -> int:
        return _U64.unpack(take(8))[0]

    config = take(u64()).decode("utf-8")
    arrays: dict[str, np.ndarray] = {}
    while pos < len(data):
        name = take(u64()).decode("utf-8")
        rank = u64()
        shape = tuple(u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return config, arrays


def save(path, config: str, arrays: Iterable[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(dumps(config, arrays))


def load(path) -> tuple[str, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
