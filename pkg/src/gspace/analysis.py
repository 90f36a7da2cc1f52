"""Variance decomposition, stationarity ratio, FLOPs model, and TF-IDF summaries.

Variance here is the scalar convention Var(S) = E ||g - mean||^2 with the
1/n (sample) normalization, which makes the law-of-total-variance identity
exact rather than approximate. Covariance between two jointly sampled
gradient families is Cov(X, Y) = E <X - EX, Y - EY>.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .core import DegenerateDataError, DimensionMismatchError, GradientMatrix, GspaceError
from .online import Partition

_WORD_RE = re.compile(r"\w+", re.UNICODE)


@dataclass(frozen=True)
class VarianceReport:
    """Law-of-total-variance decomposition of a partitioned gradient set."""

    total_variance: float
    per_cluster_variance: List[float]
    weights: List[float]
    within_term: float
    between_term: float
    variance_ratio: float
    empty_clusters: List[int]

    def to_json(self) -> str:
        return json.dumps(
            {
                "total_variance": self.total_variance,
                "per_cluster_variance": self.per_cluster_variance,
                "weights": self.weights,
                "within_term": self.within_term,
                "between_term": self.between_term,
                "variance_ratio": self.variance_ratio,
                "empty_clusters": self.empty_clusters,
            },
            indent=2,
            sort_keys=True,
        )


@dataclass(frozen=True)
class FlopsModel:
    """Per-query forward costs: base model, one adapter, and the router head."""

    f_base: float
    f_lora: float
    f_sp: float
    k: int

    def __post_init__(self):
        if min(self.f_base, self.f_lora, self.f_sp) < 0 or self.k < 0:
            raise GspaceError("FLOPs model fields must be nonnegative")


def gradient_variance(G) -> float:
    """Mean squared L2 deviation from the mean gradient (two-pass, float64)."""
    rows = G.rows if isinstance(G, GradientMatrix) else np.asarray(G, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    mean = rows.mean(axis=0)
    dev = rows - mean
    return float(np.sum(dev * dev) / rows.shape[0])


@dataclass(frozen=True)
class MixtureVarianceResult:
    lhs: float
    rhs: float
    relative_error: float


def _centered(sample: np.ndarray) -> np.ndarray:
    return sample - sample.mean(axis=0)


def mixture_variance_check(
    subset_samples: Sequence[np.ndarray], alphas: Sequence[float]
) -> MixtureVarianceResult:
    """Check the mixture-variance decomposition on one paired sample.

    ``subset_samples[i]`` holds the i-th family's draws, shape (trials, d);
    draw t of every family comes from the same joint trial, so empirical
    covariances are well-defined. LHS is the variance of the alpha-weighted
    combination; RHS is the weighted variances plus pairwise covariance
    cross terms. The identity is algebraic, so both sides agree to
    round-off when computed from the same draws.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if np.any(alphas < 0) or np.any(alphas > 1) or not math.isclose(
        float(alphas.sum()), 1.0, abs_tol=1e-12
    ):
        raise GspaceError("alphas must be convex weights (nonnegative, summing to 1)")
    if len(subset_samples) != alphas.shape[0]:
        raise DimensionMismatchError("one weight per subset sample required")
    samples = [np.asarray(s, dtype=np.float64) for s in subset_samples]
    trials = samples[0].shape[0]
    for s in samples:
        if s.shape != samples[0].shape:
            raise DimensionMismatchError("all subset samples must share (trials, d)")

    combined = sum(a * s for a, s in zip(alphas, samples))
    lhs = gradient_variance(combined)

    centered = [_centered(s) for s in samples]
    rhs = 0.0
    for i in range(len(samples)):
        rhs += float(alphas[i] ** 2) * gradient_variance(samples[i])
        for j in range(len(samples)):
            if i == j:
                continue
            cov = float(np.sum(centered[i] * centered[j]) / trials)
            rhs += float(alphas[i] * alphas[j]) * cov

    scale = max(abs(lhs), abs(rhs), 1e-300)
    return MixtureVarianceResult(lhs=lhs, rhs=rhs, relative_error=abs(lhs - rhs) / scale)


def total_variance_decomposition(
    partition: Partition, gradients: GradientMatrix
) -> VarianceReport:
    """Split Var(D) into weighted within-cluster and between-mean terms.

    Empty clusters contribute weight 0 and variance 0 and are flagged in
    the report. The identity within + between == total holds to round-off
    under the 1/n convention.
    """
    index_of = {int(gid): idx for idx, gid in enumerate(gradients.ids)}
    missing = [rid for rid in partition.assignments if int(rid) not in index_of]
    if missing:
        raise GspaceError(f"partitioned id {missing[0]} has no gradient")

    member_rows: List[List[int]] = [[] for _ in range(partition.K)]
    for rec_id, (k, _) in partition.assignments.items():
        member_rows[k].append(index_of[int(rec_id)])
    rows_by_cluster = [gradients.rows[idx] for idx in member_rows]

    n = sum(r.shape[0] for r in rows_by_cluster)
    if n == 0:
        raise DegenerateDataError("partition covers no gradients")
    mu = (
        sum(r.sum(axis=0) for r in rows_by_cluster if r.shape[0]) / n
    )

    weights, variances, empty = [], [], []
    within = 0.0
    between = 0.0
    for k, rows in enumerate(rows_by_cluster):
        if rows.shape[0] == 0:
            weights.append(0.0)
            variances.append(0.0)
            empty.append(k)
            continue
        p = rows.shape[0] / n
        var = gradient_variance(rows)
        mu_k = rows.mean(axis=0)
        weights.append(p)
        variances.append(var)
        within += p * var
        between += p * float(np.sum((mu_k - mu) ** 2))

    total = within + between
    ratio = within / total if total > 0 else float("nan")
    return VarianceReport(
        total_variance=total,
        per_cluster_variance=variances,
        weights=weights,
        within_term=within,
        between_term=between,
        variance_ratio=ratio,
        empty_clusters=empty,
    )


def stationarity_ratio(report: VarianceReport) -> float:
    """Weighted within-cluster variance over total variance.

    This is the factor that dominates the asymptotic stationarity bound of
    cluster-wise SGD relative to pooled SGD; it is <= 1 by the
    total-variance identity.
    """
    if report.total_variance <= 0:
        raise DegenerateDataError(
            "stationarity ratio undefined: total gradient variance is zero"
        )
    return report.within_term / report.total_variance


def flops_estimate(model: FlopsModel, method: str) -> Tuple[float, float]:
    """Per-query (router FLOPs, total FLOPs) for the two inference schemes.

    The ensemble scheme pays one forward + one backward (2x forward) for
    the routing gradient, then k expert forwards:
    router = f_base + 3*f_lora, total = (1+k)*f_base + (3+k)*f_lora.
    Single-expert routing pays only the classifier head:
    router = f_sp, total = f_base + f_lora + f_sp.
    """
    method = method.lower()
    if method == "ensemble":
        router = model.f_base + 3.0 * model.f_lora
        total = (1 + model.k) * model.f_base + (3 + model.k) * model.f_lora
    elif method == "routed":
        router = model.f_sp
        total = model.f_base + model.f_lora + model.f_sp
    else:
        raise GspaceError(f"unknown method {method!r} (use 'ensemble' or 'routed')")
    return router, total


def purity(partition: Partition, tags_by_id: Mapping[int, str]) -> float:
    """Majority-tag fraction: sum over clusters of the dominant tag count / n.

    Evaluation-only; requires a ground-truth tag for every partitioned id.
    """
    if not partition.assignments:
        raise DegenerateDataError("empty partition")
    majority_total = 0
    for k in range(partition.K):
        counts: Dict[str, int] = {}
        for rec_id in partition.members(k):
            tag = tags_by_id.get(int(rec_id))
            if tag is None:
                raise GspaceError(f"id {rec_id} has no ground-truth tag")
            counts[tag] = counts.get(tag, 0) + 1
        if counts:
            majority_total += max(counts.values())
    return majority_total / len(partition.assignments)


def tokenize(text: str) -> List[str]:
    """Lowercased Unicode word tokens."""
    return [t.lower() for t in _WORD_RE.findall(text)]


def tfidf_summarize(
    partition: Partition,
    texts: Mapping[int, str],
    top_m: int = 10,
) -> Dict[int, List[Tuple[str, float]]]:
    """Top TF-IDF terms per cluster.

    TF counts a term inside the cluster's concatenated text; IDF uses the
    smoothed form log((1 + K) / (1 + df)) + 1 over the K cluster documents,
    so terms present in every cluster keep a positive constant weight and a
    single-cluster summary reduces to a TF ranking. Ties break
    lexicographically. Clusters without any text yield an empty list.
    """
    if top_m < 1:
        raise GspaceError("top_m must be >= 1")
    K = partition.K
    cluster_counts: List[Dict[str, int]] = []
    for k in range(K):
        counts: Dict[str, int] = {}
        for rec_id in partition.members(k):
            text = texts.get(int(rec_id))
            if not text:
                continue
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
        cluster_counts.append(counts)

    df: Dict[str, int] = {}
    for counts in cluster_counts:
        for term in counts:
            df[term] = df.get(term, 0) + 1

    summary: Dict[int, List[Tuple[str, float]]] = {}
    for k, counts in enumerate(cluster_counts):
        scored = [
            (term, tf * (math.log((1 + K) / (1 + df[term])) + 1.0))
            for term, tf in counts.items()
        ]
        scored.sort(key=lambda item: (-item[1], item[0]))
        summary[k] = scored[:top_m]
    return summary
