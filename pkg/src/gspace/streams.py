"""Gradient stream I/O.

Two interchangeable on-disk forms, selected by file extension:

* ``.gsg`` — binary: header ``{magic "GSGR", version u16, dim u32,
  count u64, flags u32}`` followed by one block per record
  ``{id u64, [tag_len u16 + tag bytes], [text_len u32 + text bytes],
  dim x f32}``, all little-endian.
* ``.jsonl`` — one JSON object per line with fields
  ``{"id", "vector", "source_tag"?, "text"?}``.

The float payload is IEEE-754 single precision, so a write/read round trip
is bit-exact on float32 vectors. Reading is streaming: records are yielded
one at a time and the whole file is never materialized.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import numpy as np

from .core import (
    DegenerateDataError,
    GradientMatrix,
    GradientRecord,
    GspaceError,
    StreamFormatError,
)

MAGIC = b"GSGR"
VERSION = 1

FLAG_SOURCE_TAG = 1
FLAG_TEXT = 2
FLAG_NORMALIZED = 4

# Sentinels for "field absent on this record" when the stream-level flag is set.
_NO_TAG = 0xFFFF
_NO_TEXT = 0xFFFFFFFF

_HEADER = struct.Struct("<4sHIQI")


@dataclass(frozen=True)
class StreamHeader:
    magic: bytes
    version: int
    dim: int
    count: int
    flags: int

    @property
    def has_source_tag(self) -> bool:
        return bool(self.flags & FLAG_SOURCE_TAG)

    @property
    def has_text(self) -> bool:
        return bool(self.flags & FLAG_TEXT)

    @property
    def normalized(self) -> bool:
        return bool(self.flags & FLAG_NORMALIZED)


def _is_binary(path: str) -> bool:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".gsg":
        return True
    if ext in (".jsonl", ".json"):
        return False
    raise StreamFormatError(f"unknown stream extension {ext!r} (use .gsg or .jsonl)")


def write_stream(
    records: Iterable[GradientRecord],
    path: str,
    normalized: bool = False,
    dim: Optional[int] = None,
) -> int:
    """Write records to ``path``; returns the number written.

    All records must share one dimension and carry unique ids. ``dim`` is
    only needed for an empty stream, where it cannot be inferred.
    """
    records = list(records)
    if records:
        dim = records[0].dim
        seen = set()
        for rec in records:
            if rec.dim != dim:
                raise StreamFormatError(
                    f"record {rec.id} has dim {rec.dim}, expected {dim}"
                )
            if rec.id in seen:
                raise StreamFormatError(f"duplicate record id {rec.id}")
            seen.add(rec.id)
    elif dim is None:
        dim = 1

    if _is_binary(path):
        _write_gsg(records, path, dim, normalized)
    else:
        _write_jsonl(records, path)
    return len(records)


def _write_gsg(records, path, dim, normalized):
    flags = 0
    if any(rec.source_tag is not None for rec in records):
        flags |= FLAG_SOURCE_TAG
    if any(rec.text is not None for rec in records):
        flags |= FLAG_TEXT
    if normalized:
        flags |= FLAG_NORMALIZED
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, len(records), flags))
        for rec in records:
            fh.write(struct.pack("<Q", rec.id))
            if flags & FLAG_SOURCE_TAG:
                if rec.source_tag is None:
                    fh.write(struct.pack("<H", _NO_TAG))
                else:
                    raw = rec.source_tag.encode("utf-8")
                    if len(raw) >= _NO_TAG:
                        raise StreamFormatError(f"source_tag too long on id {rec.id}")
                    fh.write(struct.pack("<H", len(raw)))
                    fh.write(raw)
            if flags & FLAG_TEXT:
                if rec.text is None:
                    fh.write(struct.pack("<I", _NO_TEXT))
                else:
                    raw = rec.text.encode("utf-8")
                    if len(raw) >= _NO_TEXT:
                        raise StreamFormatError(f"text too long on id {rec.id}")
                    fh.write(struct.pack("<I", len(raw)))
                    fh.write(raw)
            fh.write(rec.vector.astype("<f4").tobytes())


def _write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"id": int(rec.id), "vector": rec.vector.astype(np.float32).tolist()}
            if rec.source_tag is not None:
                obj["source_tag"] = rec.source_tag
            if rec.text is not None:
                obj["text"] = rec.text
            fh.write(json.dumps(obj) + "\n")


def read_header(path: str) -> StreamHeader:
    """Parse and validate the stream header (binary) or synthesize one (jsonl)."""
    if _is_binary(path):
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
            if len(raw) < _HEADER.size:
                raise StreamFormatError(
                    f"truncated header: got {len(raw)} of {_HEADER.size} bytes"
                )
            magic, version, dim, count, flags = _HEADER.unpack(raw)
            if magic != MAGIC:
                raise StreamFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
            if version != VERSION:
                raise StreamFormatError(f"unsupported version {version}")
            return StreamHeader(magic, version, dim, count, flags)
    # JSON-lines carries no header; derive dim/count/field flags from content.
    count = 0
    dim = 1
    flags = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            if count == 0:
                obj = json.loads(line)
                dim = len(obj["vector"])
            count += 1
    return StreamHeader(MAGIC, VERSION, dim, count, flags)


def read_stream(path: str) -> Iterator[GradientRecord]:
    """Lazily yield records from ``path``.

    Raises StreamFormatError on bad magic/version and on truncation, naming
    the byte offset where the file ended early.
    """
    if _is_binary(path):
        return _read_gsg(path)
    return _read_jsonl(path)


def _read_exact(fh, nbytes, offset):
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise StreamFormatError(
            f"truncated stream: needed {nbytes} bytes at byte offset {offset}, "
            f"got {len(buf)}"
        )
    return buf


def _read_gsg(path):
    header = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        offset = _HEADER.size
        vec_bytes = 4 * header.dim
        for _ in range(header.count):
            buf = _read_exact(fh, 8, offset)
            offset += 8
            (rec_id,) = struct.unpack("<Q", buf)
            tag = None
            if header.has_source_tag:
                (tag_len,) = struct.unpack("<H", _read_exact(fh, 2, offset))
                offset += 2
                if tag_len != _NO_TAG:
                    tag = _read_exact(fh, tag_len, offset).decode("utf-8")
                    offset += tag_len
            text = None
            if header.has_text:
                (text_len,) = struct.unpack("<I", _read_exact(fh, 4, offset))
                offset += 4
                if text_len != _NO_TEXT:
                    text = _read_exact(fh, text_len, offset).decode("utf-8")
                    offset += text_len
            vec = np.frombuffer(_read_exact(fh, vec_bytes, offset), dtype="<f4").copy()
            offset += vec_bytes
            yield GradientRecord(id=rec_id, vector=vec, source_tag=tag, text=text)


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StreamFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                yield GradientRecord(
                    id=int(obj["id"]),
                    vector=np.asarray(obj["vector"], dtype=np.float32),
                    source_tag=obj.get("source_tag"),
                    text=obj.get("text"),
                )
            except KeyError as exc:
                raise StreamFormatError(f"{path}:{lineno}: missing field {exc}") from exc


class GradientStream:
    """Re-iterable view of a stream file (each iteration reopens the file)."""

    def __init__(self, path: str):
        self.path = str(path)

    @property
    def header(self) -> StreamHeader:
        return read_header(self.path)

    def __iter__(self) -> Iterator[GradientRecord]:
        return read_stream(self.path)


def batch_iter(
    records: Iterable[GradientRecord], batch_size: int
) -> Iterator[GradientMatrix]:
    """Group a record sequence into GradientMatrix batches of ``batch_size``.

    Order is preserved; every batch is full except possibly the last.
    """
    if batch_size < 1:
        raise GspaceError(f"batch_size must be >= 1, got {batch_size}")
    buf = []
    for rec in records:
        buf.append(rec)
        if len(buf) == batch_size:
            yield GradientMatrix.from_records(buf)
            buf = []
    if buf:
        yield GradientMatrix.from_records(buf)


def read_matrix(path: str) -> GradientMatrix:
    """Materialize an entire stream as one GradientMatrix."""
    records = list(read_stream(path))
    if not records:
        raise DegenerateDataError(f"empty gradient stream: {path}")
    return GradientMatrix.from_records(records)
