"""Expert routing: trained linear-softmax head plus three rule baselines.

The trained router (a frozen-feature linear projection + softmax) learns
from discovered cluster assignments. Baselines route by keyword overlap,
by cosine to per-cluster mean features, or by cosine of a freshly computed
gradient against the stored centroids (the expensive route the trained
head replaces).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .core import (
    DimensionMismatchError,
    GradientMatrix,
    GspaceError,
    ZeroVectorError,
)
from .online import assign_batch
from .rng import substream
from .spectral import CentroidSet


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass(frozen=True)
class RouterModel:
    """Linear-softmax routing head: p(k | x) = softmax(W x + b)."""

    W: np.ndarray
    b: np.ndarray
    metadata: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise DimensionMismatchError(
                f"W must be (K, f) with b of length K; got {W.shape} and {b.shape}"
            )
        if W.shape[0] < 2:
            raise GspaceError("router needs at least 2 experts")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise GspaceError("router parameters must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def num_experts(self) -> int:
        return int(self.W.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.W.shape[1])

    def to_json(self) -> str:
        return json.dumps(
            {
                "K": self.num_experts,
                "f": self.feature_dim,
                "W": self.W.ravel().tolist(),
                "b": self.b.tolist(),
                "metadata": self.metadata,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "RouterModel":
        obj = json.loads(text)
        K, f = int(obj["K"]), int(obj["f"])
        W = np.asarray(obj["W"], dtype=np.float64).reshape(K, f)
        return cls(W=W, b=np.asarray(obj["b"], dtype=np.float64), metadata=obj.get("metadata", {}))


def _ce_loss_and_grad(
    W: np.ndarray, b: np.ndarray, X: np.ndarray, labels: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy and its exact gradient w.r.t. (W, b)."""
    n = X.shape[0]
    probs = softmax(X @ W.T + b)
    ce = float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
    probs[np.arange(n), labels] -= 1.0
    probs /= n
    return ce, probs.T @ X, probs.sum(axis=0)


def train_router(
    features: np.ndarray,
    labels: Sequence[int],
    epochs: int = 200,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: int = 32,
    num_classes: Optional[int] = None,
) -> RouterModel:
    """Fit the routing head by mini-batch SGD on cross-entropy.

    Features are treated as frozen; only (W, b) move. Deterministic for a
    fixed seed. Every class must appear in the labels.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatchError("features must be (n, f) aligned with labels")
    K = int(num_classes) if num_classes is not None else int(y.max()) + 1
    present = set(int(c) for c in np.unique(y))
    missing = sorted(set(range(K)) - present)
    if missing:
        raise GspaceError(f"classes absent from training labels: {missing}")
    if X.shape[0] < K:
        raise GspaceError(f"need at least {K} examples to fit {K} classes")
    if epochs < 1 or lr <= 0 or batch_size < 1:
        raise GspaceError("need epochs >= 1, lr > 0, batch_size >= 1")

    rng = substream(seed, "router-train")
    W = np.zeros((K, X.shape[1]))
    b = np.zeros(K)
    initial_ce, _, _ = _ce_loss_and_grad(W, b, X, y)
    for _ in range(epochs):
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], batch_size):
            idx = order[start : start + batch_size]
            _, gW, gb = _ce_loss_and_grad(W, b, X[idx], y[idx])
            W -= lr * gW
            b -= lr * gb
    final_ce, _, _ = _ce_loss_and_grad(W, b, X, y)
    return RouterModel(
        W=W,
        b=b,
        metadata={
            "epochs": epochs,
            "lr": lr,
            "seed": int(seed),
            "initial_ce": initial_ce,
            "final_ce": final_ce,
        },
    )


def route(model: RouterModel, feature: np.ndarray) -> Tuple[int, np.ndarray]:
    """Pick the argmax-probability expert (ties to the lowest index)."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (model.feature_dim,):
        raise DimensionMismatchError(
            f"feature dim {feature.shape} != router dim {model.feature_dim}"
        )
    probs = softmax(model.W @ feature + model.b)
    return int(np.argmax(probs)), probs


def baseline_gs(centroids: CentroidSet, gradient: np.ndarray) -> int:
    """Route by cosine of a gradient against the stored centroids.

    Delegates to the exact assignment rule the clustering engine uses, so
    the two can never drift apart.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    batch = GradientMatrix(rows=gradient[None, :], ids=np.array([0], dtype=np.uint64))
    labels, _ = assign_batch(batch, centroids)
    return int(labels[0])


def baseline_es(cluster_mean_features: np.ndarray, feature: np.ndarray) -> int:
    """Route by cosine against each cluster's mean input feature."""
    means = np.asarray(cluster_mean_features, dtype=np.float64)
    feature = np.asarray(feature, dtype=np.float64)
    if means.ndim != 2 or means.shape[1] != feature.shape[0]:
        raise DimensionMismatchError("feature dim does not match cluster means")
    fn = float(np.linalg.norm(feature))
    if fn == 0.0:
        raise ZeroVectorError("zero feature vector")
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVectorError("zero cluster mean feature")
    sims = (means @ feature) / (norms * fn)
    return int(np.argmax(sims))


def baseline_ks(keyword_sets: Sequence[Set[str]], tokens: Sequence[str]) -> int:
    """Route by keyword overlap; zero overlap everywhere falls back to 0."""
    if not keyword_sets or any(not ks for ks in keyword_sets):
        raise GspaceError("every keyword set must be nonempty")
    toks = set(tokens)
    overlaps = [len(toks & set(ks)) for ks in keyword_sets]
    return int(np.argmax(overlaps))


@dataclass(frozen=True)
class RoutingEval:
    accuracy: float
    latency_ms: float
    confusion: np.ndarray
    feature_source: str

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "latency_ms": self.latency_ms,
            "confusion": self.confusion.tolist(),
            "feature_source": self.feature_source,
        }


def evaluate_routers(
    routers: Mapping[str, Callable[[int], int]],
    labels: Sequence[int],
    K: int,
    feature_source: str = "sim-inputs",
    min_timed_queries: int = 100,
    warmup_queries: int = 10,
) -> Dict[str, RoutingEval]:
    """Score each router's accuracy and median per-query latency.

    A router is a callable from test-example index to expert index so each
    can pay its own true per-query cost (the gradient-similarity baseline
    computes a fresh gradient inside the call). Latency is the median over
    at least ``min_timed_queries`` timed calls after a short warm-up.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise GspaceError("empty test set")
    results: Dict[str, RoutingEval] = {}
    for name, fn in routers.items():
        confusion = np.zeros((K, K), dtype=np.int64)
        predictions = np.empty(n, dtype=np.int64)
        for i in range(n):
            predictions[i] = fn(i)
            confusion[labels[i], predictions[i]] += 1
        accuracy = float(np.trace(confusion) / n)

        for i in range(warmup_queries):
            fn(i % n)
        timings = []
        rounds = max(min_timed_queries, n)
        for i in range(rounds):
            start = time.perf_counter_ns()
            fn(i % n)
            timings.append(time.perf_counter_ns() - start)
        latency_ms = float(np.median(timings) / 1e6)
        results[name] = RoutingEval(
            accuracy=accuracy,
            latency_ms=latency_ms,
            confusion=confusion,
            feature_source=feature_source,
        )
    return results
