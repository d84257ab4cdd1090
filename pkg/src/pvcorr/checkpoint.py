"""Named-tensor checkpoint container (``PVCK``).

Layout, all little-endian::

    b"PVCK" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | data f32 * prod(dims)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PVCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors):
    """Serialize a name -> array mapping, preserving its order."""
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"rank {arr.ndim} too large for {name}")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(buf):
    """Parse bytes produced by :func:`dumps` into a dict of float32 arrays."""
    mv = memoryview(buf)
    if bytes(mv[:4]) != MAGIC:
        raise CheckpointError("not a PVCK checkpoint (bad magic)")
    if len(mv) < 12:
        raise CheckpointError("truncated header")
    version, count = struct.unpack_from("<II", mv, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", mv, pos)
            pos += 2
            name = bytes(mv[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", mv, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", mv, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(mv):
                raise CheckpointError(f"truncated data for {name}")
            arr = np.frombuffer(mv, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            tensors[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(mv):
        raise CheckpointError(f"{len(mv) - pos} trailing bytes after last entry")
    return tensors


def save(path, tensors):
    Path(path).write_bytes(dumps(tensors))


def load(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads(buf)
