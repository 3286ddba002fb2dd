"""Binary segment store.

Layout (little-endian)::

    b"EGSG" | u32 version | u32 count | count x record
    record = u16 len + participant_id | u16 len + shift_id | i64 start_ts_ms
             | i64 end_ts_ms | i8 label (-1 = none) | u8 fg_active
             | u32 L | u32 F | L*F float32
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import SceneLabel, Segment

STORE_MAGIC = b"EGSG"
STORE_VERSION = 1


class StoreError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def store_bytes(segments: Sequence[Segment]) -> bytes:
    parts = [STORE_MAGIC, struct.pack("<II", STORE_VERSION, len(segments))]
    for s in segments:
        mat = np.ascontiguousarray(s.matrix, dtype="<f4")
        label = -1 if s.label is None else int(s.label)
        parts += [
            _pack_str(s.participant_id),
            _pack_str(s.shift_id),
            struct.pack("<qqbBII", s.start_ts_ms, s.end_ts_ms, label, int(s.fg_active), *mat.shape),
            mat.tobytes(),
        ]
    return b"".join(parts)


def write_store(segments: Sequence[Segment], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(store_bytes(segments))
    tmp.replace(path)


def read_store(path) -> list[Segment]:
    path = Path(path)
    if not path.exists():
        raise StoreError(f"{path}: segment store not found")
    data = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise StoreError(f"{path}: truncated segment store")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def text():
        return take(struct.unpack("<H", take(2))[0]).decode("utf-8")

    if take(4) != STORE_MAGIC:
        raise StoreError(f"{path}: not a segment store")
    version, count = struct.unpack("<II", take(8))
    if version != STORE_VERSION:
        raise StoreError(f"{path}: unsupported store version {version}")
    out = []
    for _ in range(count):
        pid, sid = text(), text()
        start, end, label, fg, L, F = struct.unpack("<qqbBII", take(26))
        mat = np.frombuffer(take(4 * L * F), dtype="<f4").reshape(L, F).astype(np.float32)
        out.append(Segment(pid, start, mat, None if label < 0 else SceneLabel(label), bool(fg), sid, end))
    if pos != len(data):
        raise StoreError(f"{path}: trailing bytes")
    return out
