"""PNCK checkpoint container: a flat list of named float32 arrays.

Layout (little-endian)::

    b"PNCK" | u8 version (1)
    repeated until EOF:
        u32 name length | name (UTF-8) | u32 rank | rank x u32 extents | float32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PNCK"
VERSION = 1


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, bytes([VERSION])]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(raw: bytes) -> dict[str, np.ndarray]:
    if len(raw) < 5 or raw[:4] != MAGIC:
        raise FormatError("not a PNCK checkpoint")
    if raw[4] != VERSION:
        raise FormatError(f"unsupported PNCK version {raw[4]}")
    out: dict[str, np.ndarray] = {}
    pos = 5
    try:
        while pos < len(raw):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if pos + name_len > len(raw):
                raise FormatError("truncated entry name")
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(raw):
                raise FormatError(f"truncated data for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed PNCK entry: {exc}") from exc
    return out


def save(arrays: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
