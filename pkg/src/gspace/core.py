"""Core data model: per-example gradient records and cosine geometry.

Gradients are stored as 32-bit floats on disk (see :mod:`gspace.streams`)
but every in-memory accumulation (similarity, variance, SVD, EMA) runs in
64-bit so downstream identity checks hold at 1e-9 tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class GspaceError(Exception):
    """Base class for all gspace errors."""


class DimensionMismatchError(GspaceError):
    """Operands have incompatible dimensions."""


class ZeroVectorError(GspaceError):
    """A zero-norm vector reached an operation that needs a direction."""


class DegenerateDataError(GspaceError):
    """Input data carries no usable structure (empty, all-zero, constant)."""


class StreamFormatError(GspaceError):
    """A gradient stream file is malformed."""


@dataclass(frozen=True)
class GradientRecord:
    """One example's gradient vector plus optional evaluation metadata.

    Attributes:
        id: caller-supplied unsigned 64-bit example identifier.
        vector: dense gradient components, float32 (the on-disk precision).
        source_tag: optional ground-truth domain label, used only for
            evaluation (purity), never by the clustering itself.
        text: optional UTF-8 payload for keyword summarization.
    """

    id: int
    vector: np.ndarray
    source_tag: Optional[str] = None
    text: Optional[str] = None

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim != 1:
            raise DimensionMismatchError(
                f"record {self.id}: vector must be 1-D, got shape {vec.shape}"
            )
        if not np.all(np.isfinite(vec)):
            raise GspaceError(f"record {self.id}: vector contains non-finite values")
        if self.id < 0:
            raise GspaceError(f"record id must be unsigned, got {self.id}")
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True)
class GradientMatrix:
    """n gradient vectors stacked row-major, with a parallel id list.

    Rows are promoted to float64 on construction; this is the working
    precision for SVD, variance and centroid math.
    """

    rows: np.ndarray
    ids: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        ids = np.asarray(self.ids, dtype=np.uint64)
        if rows.ndim != 2:
            raise DimensionMismatchError(f"rows must be 2-D, got shape {rows.shape}")
        if rows.shape[0] < 1:
            raise DegenerateDataError("gradient matrix needs at least one row")
        if ids.shape != (rows.shape[0],):
            raise DimensionMismatchError(
                f"ids length {ids.shape} does not match {rows.shape[0]} rows"
            )
        if not np.all(np.isfinite(rows)):
            raise GspaceError("gradient matrix contains non-finite values")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "dim", int(rows.shape[1]))

    @property
    def n(self) -> int:
        return int(self.rows.shape[0])

    @classmethod
    def from_records(cls, records: Sequence[GradientRecord]) -> "GradientMatrix":
        records = list(records)
        if not records:
            raise DegenerateDataError("cannot build a matrix from zero records")
        dim = records[0].dim
        for rec in records:
            if rec.dim != dim:
                raise DimensionMismatchError(
                    f"record {rec.id} has dim {rec.dim}, expected {dim}"
                )
        rows = np.stack([rec.vector for rec in records]).astype(np.float64)
        ids = np.array([rec.id for rec in records], dtype=np.uint64)
        return cls(rows=rows, ids=ids)


def normalize(v: np.ndarray) -> np.ndarray:
    """Return v / ||v||_2 as float64.

    Raises:
        ZeroVectorError: if v has zero norm.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ZeroVectorError("cannot normalize a zero vector")
    return v / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between a and b, clamped to [-1, 1].

    Raises:
        DimensionMismatchError: if the vectors differ in length.
        ZeroVectorError: if either vector has zero norm (an explicit error,
            never a silent NaN).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity is undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def unit_rows(matrix: GradientMatrix) -> GradientMatrix:
    """L2-normalize every row of a gradient matrix.

    Idempotent on already-normalized input. Raises ZeroVectorError naming
    the offending id if any row has zero norm.
    """
    norms = np.linalg.norm(matrix.rows, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroVectorError(f"zero-norm gradient for id {int(matrix.ids[zero[0]])}")
    return GradientMatrix(rows=matrix.rows / norms[:, None], ids=matrix.ids)
