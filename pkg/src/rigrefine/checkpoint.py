"""RRCK checkpoint container.

Little-endian layout::

    b"RRCK"  u32 version
    repeated until EOF:
        u32 name_length, name bytes (utf-8), u32 value_count, value_count x f64
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"RRCK"
VERSION = 1


def encode(blocks: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, values in blocks.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(np.asarray(values, dtype="<f8").reshape(-1))
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.size))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointFormatError("missing RRCK magic")
    if len(data) < 8:
        raise CheckpointFormatError("truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        try:
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (count,) = struct.unpack_from("<I", data, pos)
            pos += 4
        except struct.error as exc:
            raise CheckpointFormatError("truncated block header") from exc
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointFormatError(f"block {name!r} truncated")
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(float)
        pos = end
    return out


def save(path, blocks: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(blocks))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
