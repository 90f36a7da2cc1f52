"""Writer for the `.gsg` gradient-stream format.

Layout (all little-endian): header ``{magic "GSGR", version u16=1,
dim u32, count u64, flags u32}`` followed by one block per record
``{id u64, tag_len u16 + tag bytes, text_len u32 + text bytes,
dim x f32}``. Flag bits: 1 = records carry a source tag, 2 = records
carry text, 4 = vectors were L2-normalized at write time.

Every record this package emits carries both optional fields (possibly
empty strings), so the flagged length-prefixed blocks are always present.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAGIC = b"GSGR"
VERSION = 1
FLAG_SOURCE_TAG = 1
FLAG_TEXT = 2
FLAG_NORMALIZED = 4

_HEADER = struct.Struct("<4sHIQI")


@dataclass(frozen=True)
class StreamRecord:
    id: int
    vector: np.ndarray
    source_tag: str = ""
    text: str = ""


def write_gsg(records: Sequence[StreamRecord], path: str, normalized: bool = False) -> int:
    """Write records to ``path``; returns the count written."""
    records = list(records)
    if records:
        dim = int(records[0].vector.shape[0])
    else:
        dim = 1
    flags = FLAG_SOURCE_TAG | FLAG_TEXT
    if normalized:
        flags |= FLAG_NORMALIZED
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, len(records), flags))
        for rec in records:
            vec = np.asarray(rec.vector, dtype="<f4")
            if vec.shape != (dim,):
                raise ValueError(f"record {rec.id}: expected dim {dim}, got {vec.shape}")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"record {rec.id}: non-finite gradient component")
            fh.write(struct.pack("<Q", rec.id))
            tag = rec.source_tag.encode("utf-8")
            fh.write(struct.pack("<H", len(tag)))
            fh.write(tag)
            text = rec.text.encode("utf-8")
            fh.write(struct.pack("<I", len(text)))
            fh.write(text)
            fh.write(vec.tobytes())
    return len(records)
