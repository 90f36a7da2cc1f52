"""Online centroid refinement and final assignment.

Batches of gradients are assigned to the nearest centroid by cosine
similarity, recent assignments are kept in per-cluster FIFO caches, and
centroids are refreshed with an exponential moving average of each cache's
mean. Centroids are renormalized to unit length after every EMA step;
cosine assignment is scale-free, so renormalization never changes any
assignment while preventing magnitude decay.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    DimensionMismatchError,
    GradientMatrix,
    GradientRecord,
    GspaceError,
    ZeroVectorError,
    unit_rows,
)
from .spectral import CentroidSet
from .streams import batch_iter


class ClusterCache:
    """Per-cluster FIFO buffers of recently assigned gradient vectors.

    Capacity is exactly ``alpha * batch_size`` per cluster; eviction is
    strictly oldest-first.
    """

    def __init__(self, k: int, capacity: int):
        if k < 1 or capacity < 1:
            raise GspaceError("cache needs k >= 1 and capacity >= 1")
        self.capacity = int(capacity)
        self._buffers: List[Deque[np.ndarray]] = [
            deque(maxlen=capacity) for _ in range(k)
        ]

    @property
    def k(self) -> int:
        return len(self._buffers)

    def push(self, cluster: int, vectors: Sequence[np.ndarray]) -> None:
        if not 0 <= cluster < self.k:
            raise GspaceError(f"unknown cluster index {cluster}")
        buf = self._buffers[cluster]
        for v in vectors:
            buf.append(np.asarray(v, dtype=np.float64))

    def contents(self, cluster: int) -> List[np.ndarray]:
        if not 0 <= cluster < self.k:
            raise GspaceError(f"unknown cluster index {cluster}")
        return list(self._buffers[cluster])

    def size(self, cluster: int) -> int:
        return len(self._buffers[cluster])

    def mean(self, cluster: int) -> Optional[np.ndarray]:
        buf = self._buffers[cluster]
        if not buf:
            return None
        return np.mean(np.stack(buf), axis=0)


@dataclass
class OnlineState:
    """Mutable refinement state: centroids, caches, and EMA knobs."""

    centroids: CentroidSet
    cache: ClusterCache
    beta: float = 0.9
    alpha: int = 5
    epoch: int = 0
    last_drift: float = 0.0
    idle_clusters: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise GspaceError(f"beta must be in [0, 1), got {self.beta}")
        if self.alpha < 1:
            raise GspaceError(f"alpha must be a positive integer, got {self.alpha}")
        if self.cache.k != self.centroids.k:
            raise GspaceError("cache and centroid cluster counts differ")

    @classmethod
    def initialize(
        cls,
        centroids: CentroidSet,
        batch_size: int,
        beta: float = 0.9,
        alpha: int = 5,
    ) -> "OnlineState":
        cache = ClusterCache(k=centroids.k, capacity=alpha * batch_size)
        return cls(centroids=centroids, cache=cache, beta=beta, alpha=alpha)


def assign_batch(
    batch: GradientMatrix, centroids: CentroidSet
) -> Tuple[np.ndarray, np.ndarray]:
    """Assign each row to the most cosine-aligned centroid.

    Rows are normalized in place of ingestion-time normalization (a no-op
    when the stream was already unit-norm). Ties break to the lowest
    cluster index. Returns (labels, similarities).
    """
    if batch.dim != centroids.dim:
        raise DimensionMismatchError(
            f"batch dim {batch.dim} != centroid dim {centroids.dim}"
        )
    rows = unit_rows(batch).rows
    sims = rows @ centroids.centroids.T
    labels = np.argmax(sims, axis=1)
    return labels.astype(np.int64), sims[np.arange(rows.shape[0]), labels]


def cache_push(cache: ClusterCache, cluster: int, vectors: Sequence[np.ndarray]) -> ClusterCache:
    """Append vectors (newest-last) to one cluster's FIFO buffer."""
    cache.push(cluster, vectors)
    return cache


def ema_update(state: OnlineState) -> Tuple[CentroidSet, np.ndarray]:
    """One EMA refresh of every centroid from its cache mean.

    New centroid = beta * old + (1 - beta) * cache_mean, renormalized to
    unit length. Clusters with an empty cache keep their centroid. Returns
    the new CentroidSet and per-cluster drift, measured as the L2 distance
    between successive unit centroids.
    """
    old = state.centroids.centroids
    new = old.copy()
    drifts = np.zeros(state.centroids.k)
    for k in range(state.centroids.k):
        mean = state.cache.mean(k)
        if mean is None:
            continue
        blended = state.beta * old[k] + (1.0 - state.beta) * mean
        norm = float(np.linalg.norm(blended))
        if norm == 0.0:
            raise ZeroVectorError(
                f"EMA produced a zero centroid for cluster {k} "
                "(cache mean exactly antipodal to the centroid)"
            )
        new[k] = blended / norm
        drifts[k] = float(np.linalg.norm(new[k] - old[k]))
    updated = CentroidSet(centroids=new, epoch=state.centroids.epoch + 1)
    state.centroids = updated
    return updated, drifts


def refine_epoch(
    records: Iterable[GradientRecord], state: OnlineState, batch_size: int
) -> OnlineState:
    """One full pass: per batch, assign -> cache push -> EMA update.

    ``state.last_drift`` is set to the max per-cluster L2 movement between
    the epoch's starting and ending unit centroids, the quantity the
    convergence loop monitors. Clusters that received no assignments all
    epoch are tracked in ``state.idle_clusters`` (flagged, never deleted).
    """
    start = state.centroids.centroids.copy()
    counts = np.zeros(state.centroids.k, dtype=np.int64)
    for batch in batch_iter(records, batch_size):
        labels, _ = assign_batch(batch, state.centroids)
        rows = unit_rows(batch).rows
        for k in np.unique(labels):
            members = rows[labels == k]
            cache_push(state.cache, int(k), list(members))
            counts[int(k)] += members.shape[0]
        ema_update(state)
    state.epoch += 1
    state.last_drift = float(
        np.max(np.linalg.norm(state.centroids.centroids - start, axis=1))
    )
    state.idle_clusters = [int(k) for k in np.flatnonzero(counts == 0)]
    return state


@dataclass(frozen=True)
class ConvergenceResult:
    centroids: CentroidSet
    epochs_used: int
    converged: bool
    stop_reason: str
    drift_log: List[float]
    idle_clusters: List[int]


def run_until_converged(
    stream,
    state: OnlineState,
    drift_tol: float = 1e-3,
    max_epochs: int = 50,
    batch_size: int = 32,
) -> ConvergenceResult:
    """Repeat refine_epoch until drift < tol or the epoch cap is hit.

    ``stream`` must be re-iterable (a list or a GradientStream); a plain
    generator would be exhausted after the first epoch.
    """
    if drift_tol <= 0:
        raise GspaceError("drift_tol must be positive")
    if max_epochs < 1:
        raise GspaceError("max_epochs must be >= 1")
    if state.centroids.k == 1:
        # A single cluster absorbs every record no matter where its centroid
        # sits; refinement cannot change any assignment.
        return ConvergenceResult(
            centroids=state.centroids,
            epochs_used=1,
            converged=True,
            stop_reason="single cluster: refinement is vacuous",
            drift_log=[0.0],
            idle_clusters=[],
        )

    drift_log: List[float] = []
    idle: List[int] = []
    for epoch in range(max_epochs):
        refine_epoch(stream, state, batch_size)
        drift_log.append(state.last_drift)
        idle = list(state.idle_clusters)
        if state.last_drift < drift_tol:
            return ConvergenceResult(
                centroids=state.centroids,
                epochs_used=epoch + 1,
                converged=True,
                stop_reason=f"drift {state.last_drift:.3e} < tol {drift_tol:.3e}",
                drift_log=drift_log,
                idle_clusters=idle,
            )
    return ConvergenceResult(
        centroids=state.centroids,
        epochs_used=max_epochs,
        converged=False,
        stop_reason=f"max_epochs {max_epochs} reached",
        drift_log=drift_log,
        idle_clusters=idle,
    )


@dataclass(frozen=True)
class Partition:
    """Final disjoint assignment of every record id to one cluster."""

    assignments: Dict[int, Tuple[int, float]]
    cluster_sizes: List[int]
    K: int

    def __post_init__(self):
        if sum(self.cluster_sizes) != len(self.assignments):
            raise GspaceError("cluster sizes do not sum to the assignment count")
        for rec_id, (k, _) in self.assignments.items():
            if not 0 <= k < self.K:
                raise GspaceError(f"id {rec_id} assigned to out-of-range cluster {k}")

    def label_of(self, rec_id: int) -> int:
        return self.assignments[rec_id][0]

    def members(self, cluster: int) -> List[int]:
        return [i for i, (k, _) in self.assignments.items() if k == cluster]

    def labels_for(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self.assignments[int(i)][0] for i in ids], dtype=np.int64)

    def to_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec_id in sorted(self.assignments):
                k, sim = self.assignments[rec_id]
                fh.write(
                    json.dumps({"id": rec_id, "cluster": k, "similarity": sim}) + "\n"
                )

    @classmethod
    def from_jsonl(cls, path: str) -> "Partition":
        assignments: Dict[int, Tuple[int, float]] = {}
        max_k = -1
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                assignments[int(obj["id"])] = (int(obj["cluster"]), float(obj["similarity"]))
                max_k = max(max_k, int(obj["cluster"]))
        K = max_k + 1
        sizes = [0] * K
        for k, _ in assignments.values():
            sizes[k] += 1
        return cls(assignments=assignments, cluster_sizes=sizes, K=K)


def final_assignment(
    records: Iterable[GradientRecord],
    centroids: CentroidSet,
    batch_size: int = 256,
) -> Partition:
    """Single deterministic pass assigning every record to its best centroid."""
    assignments: Dict[int, Tuple[int, float]] = {}
    sizes = [0] * centroids.k
    for batch in batch_iter(records, batch_size):
        labels, sims = assign_batch(batch, centroids)
        for rec_id, k, sim in zip(batch.ids, labels, sims):
            rec_id = int(rec_id)
            if rec_id in assignments:
                raise GspaceError(f"duplicate id {rec_id} in assignment stream")
            assignments[rec_id] = (int(k), float(sim))
            sizes[int(k)] += 1
    return Partition(assignments=assignments, cluster_sizes=sizes, K=centroids.k)
