"""Minimal SNFR1 writer, implemented directly against the format spec.

Layout (little-endian): header = magic "SNFR" + version u32 (=1) +
n_records u64 + dim u32 (=768) + T_a u16 + T_b u16; per record:
clip_id u64, label u8, 3 zero pad bytes, audio f32[T_a*768],
video f32[T_b*768]. This adapter always writes T_a = T_b = 1.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SNFR"
VERSION = 1
DIM = 768
HEADER = struct.Struct("<4sIQIHH")
RECORD_PREFIX = struct.Struct("<QB3x")


def write_snfr(records: list[tuple[int, int, np.ndarray, np.ndarray]], path: str) -> None:
    """Write (clip_id, label, audio[768], video[768]) tuples as SNFR1."""
    for clip_id, label, audio, video in records:
        if not 0 <= label <= 3:
            raise ValueError(f"clip {clip_id}: label {label} outside 0..3")
        for name, vec in (("audio", audio), ("video", video)):
            if vec.shape != (DIM,):
                raise ValueError(f"clip {clip_id}: {name} must be [{DIM}], got {vec.shape}")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"clip {clip_id}: non-finite {name} features")
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, len(records), DIM, 1, 1))
        for clip_id, label, audio, video in records:
            f.write(RECORD_PREFIX.pack(clip_id, label))
            f.write(np.ascontiguousarray(audio, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(video, dtype="<f4").tobytes())
