"""Cluster-count estimation and centroid initialization.

Given a validation gradient matrix, take its thin SVD, sweep explained
variance thresholds to fix a dominant subspace, run K-means over a range
of K inside that subspace, and keep the (threshold, K) pair with the best
silhouette. The winning subspace centroids are lifted back to full
dimension as unit "prototype gradients" for online refinement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .core import (
    DegenerateDataError,
    DimensionMismatchError,
    GradientMatrix,
    GspaceError,
    ZeroVectorError,
    normalize,
)
from .rng import substream
from . import streams


@dataclass(frozen=True)
class CentroidSet:
    """K unit-norm prototype gradients of dimension d.

    ``epoch`` counts refinement updates applied since initialization.
    """

    centroids: np.ndarray
    epoch: int = 0

    def __post_init__(self):
        cents = np.asarray(self.centroids, dtype=np.float64)
        if cents.ndim != 2 or cents.shape[0] < 1:
            raise GspaceError(f"centroids must be a (K, d) array, got {cents.shape}")
        norms = np.linalg.norm(cents, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise GspaceError("centroids must be unit vectors (within 1e-9)")
        for i in range(cents.shape[0]):
            for j in range(i + 1, cents.shape[0]):
                if np.array_equal(cents[i], cents[j]):
                    raise GspaceError(f"centroids {i} and {j} are identical")
        object.__setattr__(self, "centroids", cents)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def save(self, path: str) -> None:
        """Checkpoint as a stream file with id = cluster index."""
        records = [
            streams.GradientRecord(id=i, vector=self.centroids[i].astype(np.float32))
            for i in range(self.k)
        ]
        streams.write_stream(records, path, normalized=True)

    @classmethod
    def load(cls, path: str) -> "CentroidSet":
        records = sorted(streams.read_stream(path), key=lambda r: r.id)
        if not records:
            raise DegenerateDataError(f"empty centroid checkpoint: {path}")
        cents = np.stack([normalize(r.vector) for r in records])
        return cls(centroids=cents)


@dataclass(frozen=True)
class SpectralReport:
    """Full record of the K-estimation sweep.

    ``candidates`` holds one (tau, subspace_dim, K, silhouette) row per grid
    point so ablation plots can be drawn without rerunning.
    """

    singular_values: List[float]
    explained_variance_curve: List[Tuple[int, float]]
    candidates: List[Tuple[float, int, int, float]]
    chosen_tau: float
    chosen_subspace_dim: int
    chosen_K: int
    seed: int

    def to_json(self) -> str:
        payload = {
            "singular_values": self.singular_values,
            "explained_variance_curve": [[k, r] for k, r in self.explained_variance_curve],
            "candidates": [
                {"tau": t, "subspace_dim": m, "K": k, "silhouette": s}
                for t, m, k, s in self.candidates
            ],
            "chosen_tau": self.chosen_tau,
            "chosen_subspace_dim": self.chosen_subspace_dim,
            "chosen_K": self.chosen_K,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SpectralReport":
        obj = json.loads(text)
        return cls(
            singular_values=[float(s) for s in obj["singular_values"]],
            explained_variance_curve=[
                (int(k), float(r)) for k, r in obj["explained_variance_curve"]
            ],
            candidates=[
                (float(c["tau"]), int(c["subspace_dim"]), int(c["K"]), float(c["silhouette"]))
                for c in obj["candidates"]
            ],
            chosen_tau=float(obj["chosen_tau"]),
            chosen_subspace_dim=int(obj["chosen_subspace_dim"]),
            chosen_K=int(obj["chosen_K"]),
            seed=int(obj["seed"]),
        )


def thin_svd(G: GradientMatrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD with a deterministic sign convention.

    Returns (U, S, V) with G = U @ diag(S) @ V.T, S nonincreasing, and each
    column of V flipped so its largest-magnitude entry is positive (ties
    broken by lowest index). This makes centroids reproducible across runs.
    """
    rows = G.rows
    if not np.all(np.isfinite(rows)):
        raise GspaceError("SVD input contains non-finite entries")
    U, S, Vt = np.linalg.svd(rows, full_matrices=False)
    V = Vt.T
    for j in range(V.shape[1]):
        pivot = int(np.argmax(np.abs(V[:, j])))
        if V[pivot, j] < 0:
            V[:, j] = -V[:, j]
            U[:, j] = -U[:, j]
    return U, S, V


def explained_variance(S: np.ndarray, k: int) -> float:
    """Fraction of squared singular mass in the top-k components."""
    S = np.asarray(S, dtype=np.float64)
    r = S.shape[0]
    if not 1 <= k <= r:
        raise GspaceError(f"k must be in [1, {r}], got {k}")
    total = float(np.sum(S**2))
    if total == 0.0:
        raise DegenerateDataError("all singular values are zero")
    return float(np.sum(S[:k] ** 2) / total)


def subspace_dim_for_threshold(S: np.ndarray, tau: float) -> int:
    """Smallest k whose explained-variance ratio reaches ``tau``."""
    if not 0.0 < tau <= 1.0:
        raise GspaceError(f"threshold must be in (0, 1], got {tau}")
    S = np.asarray(S, dtype=np.float64)
    total = float(np.sum(S**2))
    if total == 0.0:
        raise DegenerateDataError("all singular values are zero")
    ratios = np.cumsum(S**2) / total
    for k in range(1, S.shape[0] + 1):
        if ratios[k - 1] >= tau:
            return k
    return int(S.shape[0])  # tau == 1 with round-off


def project(G: GradientMatrix, V: np.ndarray, k: int) -> np.ndarray:
    """Project rows onto the top-k right singular directions: G @ V[:, :k]."""
    V = np.asarray(V, dtype=np.float64)
    if k > V.shape[1]:
        raise DimensionMismatchError(f"k={k} exceeds {V.shape[1]} singular vectors")
    if V.shape[0] != G.dim:
        raise DimensionMismatchError(
            f"V has {V.shape[0]} rows but gradients have dim {G.dim}"
        )
    return G.rows @ V[:, :k]


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    wcss_path: List[float] = field(default_factory=list)

    @property
    def wcss(self) -> float:
        return self.wcss_path[-1] if self.wcss_path else float("nan")


def _sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances via the Gram identity.

    Avoids materializing an (n, m, dim) difference tensor; round-off
    negatives are clamped to zero.
    """
    p2 = np.sum(points**2, axis=1)[:, None]
    c2 = np.sum(centers**2, axis=1)[None, :]
    d2 = p2 + c2 - 2.0 * (points @ centers.T)
    return np.maximum(d2, 0.0)


def _plusplus_seed(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_distances(points, points[chosen[0]][None, :])[:, 0]
    for _ in range(1, K):
        total = float(d2.sum())
        if total == 0.0:
            # All remaining mass at distance zero (duplicate points): pick uniform.
            chosen.append(int(rng.integers(n)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, _sq_distances(points, points[chosen[-1]][None, :])[:, 0])
    return points[chosen].copy()


def kmeans(
    points: np.ndarray,
    K: int,
    seed: int | np.random.Generator,
    max_iters: int = 100,
) -> KMeansResult:
    """Deterministic Lloyd's K-means with k-means++ seeding.

    Assignment ties break to the lowest centroid index; an empty cluster is
    repaired by stealing the point currently farthest from its own centroid,
    which keeps the within-cluster sum of squares nonincreasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if K == 0:
        raise GspaceError("K must be positive")
    if K > n:
        raise GspaceError(f"K={K} exceeds {n} points")
    if max_iters < 1:
        raise GspaceError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)

    centroids = _plusplus_seed(points, K, rng)
    labels = np.full(n, -1, dtype=np.int64)
    wcss_path: List[float] = []

    for _ in range(max_iters):
        d2 = _sq_distances(points, centroids)
        new_labels = np.argmin(d2, axis=1)  # argmin ties -> lowest index
        point_d2 = d2[np.arange(n), new_labels]

        for k in range(K):
            if not np.any(new_labels == k):
                thief = int(np.argmax(point_d2))
                centroids[k] = points[thief]
                new_labels[thief] = k
                point_d2[thief] = 0.0

        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        for k in range(K):
            centroids[k] = points[labels == k].mean(axis=0)
        residual = points - centroids[labels]
        wcss_path.append(float(np.sum(residual * residual)))
        if converged:
            break

    return KMeansResult(labels=labels, centroids=centroids, wcss_path=wcss_path)


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette score under Euclidean distance.

    Singleton clusters contribute 0 by the standard convention. Raises for a
    single cluster, where the score is undefined.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    labels = np.asarray(labels, dtype=np.int64)
    uniq = np.unique(labels)
    if uniq.shape[0] < 2:
        raise GspaceError("silhouette needs at least two clusters")
    n = points.shape[0]
    dist = np.sqrt(_sq_distances(points, points))

    scores = np.zeros(n)
    sizes = {int(c): int(np.sum(labels == c)) for c in uniq}
    for i in range(n):
        own = int(labels[i])
        if sizes[own] == 1:
            continue  # singleton convention: s = 0
        a = dist[i, labels == own].sum() / (sizes[own] - 1)
        b = min(
            dist[i, labels == other].mean() for other in sizes if other != own
        )
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def select_k(
    G: GradientMatrix,
    tau_list: Sequence[float],
    K_range: Iterable[int],
    seed: int,
    max_iters: int = 100,
) -> SpectralReport:
    """Sweep (variance threshold, K) and pick the silhouette argmax.

    Each threshold fixes a subspace dimension; K-means runs for every K in
    ``K_range`` inside that subspace. Ties break to smaller K, then smaller
    tau. The full candidate grid is retained in the report.
    """
    tau_list = sorted(set(float(t) for t in tau_list))
    if not tau_list:
        raise GspaceError("tau_list must be nonempty")
    for tau in tau_list:
        if not 0.0 < tau <= 1.0:
            raise GspaceError(f"threshold must be in (0, 1], got {tau}")
    n = G.n
    ks = sorted(set(int(K) for K in K_range))
    ks = [K for K in ks if 2 <= K <= n - 1]
    if not ks:
        raise DegenerateDataError(
            f"no feasible cluster count: need 2 <= K <= {n - 1} with n={n} rows"
        )

    _, S, V = thin_svd(G)
    curve = [(k, explained_variance(S, k)) for k in range(1, S.shape[0] + 1)]

    candidates: List[Tuple[float, int, int, float]] = []
    for tau in tau_list:
        sub_dim = subspace_dim_for_threshold(S, tau)
        pts = project(G, V, sub_dim)
        for K in ks:
            result = kmeans(pts, K, _kmeans_seed(seed, tau, K), max_iters=max_iters)
            score = silhouette(pts, result.labels)
            candidates.append((tau, sub_dim, K, score))

    best = min(candidates, key=lambda c: (-c[3], c[2], c[0]))
    return SpectralReport(
        singular_values=[float(s) for s in S],
        explained_variance_curve=curve,
        candidates=candidates,
        chosen_tau=best[0],
        chosen_subspace_dim=best[1],
        chosen_K=best[2],
        seed=int(seed),
    )


def _kmeans_seed(seed: int, tau: float, K: int) -> np.random.Generator:
    return substream(seed, "select-k", repr(float(tau)), str(int(K)))


def lift_centroids(centroids_proj: np.ndarray, V_k: np.ndarray) -> CentroidSet:
    """Map subspace centroids back to full dimension and normalize them."""
    centroids_proj = np.asarray(centroids_proj, dtype=np.float64)
    V_k = np.asarray(V_k, dtype=np.float64)
    if centroids_proj.shape[1] != V_k.shape[1]:
        raise DimensionMismatchError(
            f"projected dim {centroids_proj.shape[1]} != subspace dim {V_k.shape[1]}"
        )
    lifted = centroids_proj @ V_k.T
    cents = []
    for i, c in enumerate(lifted):
        norm = float(np.linalg.norm(c))
        if norm == 0.0:
            raise ZeroVectorError(f"lifted centroid {i} has zero norm (degenerate cluster)")
        cents.append(c / norm)
    return CentroidSet(centroids=np.stack(cents))


def initial_centroids(G: GradientMatrix, report: SpectralReport) -> CentroidSet:
    """Reproduce the winning K-means run of ``report`` and lift its centroids.

    Deterministic: reuses the same per-candidate substream as select_k.
    """
    _, S, V = thin_svd(G)
    sub_dim = report.chosen_subspace_dim
    pts = project(G, V, sub_dim)
    result = kmeans(
        pts, report.chosen_K, _kmeans_seed(report.seed, report.chosen_tau, report.chosen_K)
    )
    return lift_centroids(result.centroids, V[:, :sub_dim])
