"""End-to-end orchestration shared by the CLI and the experiment reports.

Each function is deterministic given (inputs, seed): every stage draws from
its own named substream, so reruns are byte-reproducible and changing one
stage cannot reshuffle another.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import analysis
from .core import (
    DegenerateDataError,
    GradientMatrix,
    GradientRecord,
    GspaceError,
    unit_rows,
)
from .online import (
    ConvergenceResult,
    OnlineState,
    Partition,
    final_assignment,
    run_until_converged,
)
from .router import (
    RouterModel,
    RoutingEval,
    baseline_es,
    baseline_gs,
    baseline_ks,
    evaluate_routers,
    route,
    train_router,
)
from .rng import substream
from .sim import (
    DEFAULT_K_RANGE,
    DEFAULT_TAU_LIST,
    SimConfig,
    embedding_vs_gradient_correlation,
    expert_vs_shared_experiment,
    gen_mixture,
    gradient_records,
    random_partition,
    warmup_train,
)
from .spectral import CentroidSet, SpectralReport, initial_centroids, select_k
from .streams import read_stream


def validation_matrix(records: Sequence[GradientRecord], seed: int, cap: int = 2048) -> GradientMatrix:
    """Unit-normalized validation subset of at most ``cap`` rows."""
    matrix = unit_rows(GradientMatrix.from_records(list(records)))
    if matrix.n <= cap:
        return matrix
    idx = substream(seed, "val-subset").choice(matrix.n, size=cap, replace=False)
    idx = np.sort(idx)
    return GradientMatrix(rows=matrix.rows[idx], ids=matrix.ids[idx])


def run_estimate_k(
    records: Sequence[GradientRecord],
    seed: int,
    tau_list: Sequence[float] = DEFAULT_TAU_LIST,
    k_range: Sequence[int] = DEFAULT_K_RANGE,
) -> Tuple[SpectralReport, CentroidSet]:
    """SVD sweep on the validation subset; returns the report and lifted centroids."""
    records = list(records)
    if not records:
        raise DegenerateDataError("empty gradient stream")
    val = validation_matrix(records, seed)
    report = select_k(val, tau_list, k_range, seed)
    centroids = initial_centroids(val, report)
    return report, centroids


def run_cluster(
    records,
    centroids: CentroidSet,
    batch_size: int = 32,
    beta: float = 0.9,
    alpha: int = 5,
    drift_tol: float = 1e-3,
    max_epochs: int = 50,
) -> Tuple[ConvergenceResult, Partition]:
    """Online refinement to convergence, then the final assignment pass.

    ``records`` must be re-iterable (a list or GradientStream).
    """
    state = OnlineState.initialize(centroids, batch_size=batch_size, beta=beta, alpha=alpha)
    convergence = run_until_converged(
        records, state, drift_tol=drift_tol, max_epochs=max_epochs, batch_size=batch_size
    )
    partition = final_assignment(records, convergence.centroids)
    return convergence, partition


def run_analyze(
    partition: Partition,
    records: Sequence[GradientRecord],
    top_m: int = 8,
) -> dict:
    """Variance decomposition, stationarity ratio, and optional TF-IDF summary."""
    records = list(records)
    matrix = GradientMatrix.from_records(records)
    known = {int(i) for i in matrix.ids}
    missing = sorted(rid for rid in partition.assignments if rid not in known)
    if missing:
        raise GspaceError(f"partition id {missing[0]} missing from the stream")
    report = analysis.total_variance_decomposition(partition, matrix)
    ratio = analysis.stationarity_ratio(report)
    per_cluster_violations = [
        k
        for k, var in enumerate(report.per_cluster_variance)
        if var > report.total_variance * (1 + 1e-12)
    ]
    payload = {
        "variance": {
            "total_variance": report.total_variance,
            "per_cluster_variance": report.per_cluster_variance,
            "weights": report.weights,
            "within_term": report.within_term,
            "between_term": report.between_term,
            "variance_ratio": report.variance_ratio,
            "empty_clusters": report.empty_clusters,
        },
        "stationarity_ratio": ratio,
        "per_cluster_variance_exceeds_total": per_cluster_violations,
    }
    texts = {rec.id: rec.text for rec in records if rec.text}
    if texts:
        summary = analysis.tfidf_summarize(partition, texts, top_m=top_m)
        payload["tfidf_terms"] = {
            str(k): [[term, weight] for term, weight in terms] for k, terms in summary.items()
        }
    tags = {rec.id: rec.source_tag for rec in records if rec.source_tag}
    if len(tags) == len(partition.assignments):
        payload["purity"] = analysis.purity(partition, tags)
    return payload


@dataclass(frozen=True)
class RouterBundle:
    """Everything needed to query the four router variants on one fixture."""

    sp: RouterModel
    cluster_means: np.ndarray
    keyword_sets: List[set]
    centroids: CentroidSet
    train_indices: np.ndarray
    test_indices: np.ndarray
    labels: np.ndarray


def build_router_bundle(
    dataset,
    partition: Partition,
    centroids: CentroidSet,
    seed: int,
    train_fraction: float = 0.75,
    epochs: int = 200,
    lr: float = 0.1,
    top_m: int = 8,
) -> RouterBundle:
    """Split the fixture, fit the trained router, and derive baseline tables.

    Cluster means, keyword sets and the router head all come from the train
    split only; the test split stays held out for evaluation.
    """
    labels = partition.labels_for(dataset.ids)
    rng = substream(seed, "router-split")
    perm = rng.permutation(dataset.n)
    n_train = int(round(train_fraction * dataset.n))
    train_idx, test_idx = perm[:n_train], perm[n_train:]

    sp = train_router(
        dataset.inputs[train_idx], labels[train_idx],
        epochs=epochs, lr=lr, seed=seed, num_classes=partition.K,
    )
    means = np.stack(
        [dataset.inputs[train_idx][labels[train_idx] == k].mean(axis=0) for k in range(partition.K)]
    )
    train_texts = {int(dataset.ids[i]): dataset.texts[i] for i in train_idx}
    train_part = Partition(
        assignments={int(dataset.ids[i]): (int(labels[i]), 1.0) for i in train_idx},
        cluster_sizes=[int(np.sum(labels[train_idx] == k)) for k in range(partition.K)],
        K=partition.K,
    )
    keywords = analysis.tfidf_summarize(train_part, train_texts, top_m=top_m)
    keyword_sets = [set(term for term, _ in keywords[k]) or {"_"} for k in range(partition.K)]
    return RouterBundle(
        sp=sp,
        cluster_means=means,
        keyword_sets=keyword_sets,
        centroids=centroids,
        train_indices=train_idx,
        test_indices=test_idx,
        labels=labels,
    )


def evaluate_router_bundle(
    bundle: RouterBundle, dataset, model, grad_params: np.ndarray
) -> Dict[str, RoutingEval]:
    """Accuracy/latency table over the held-out split for SP, ES, KS, GS.

    The GS callable computes a fresh per-example gradient inside every
    query, which is exactly the cost it pays in deployment.
    """
    te = bundle.test_indices
    token_lists = [analysis.tokenize(dataset.texts[i]) for i in te]

    def sp_router(i):
        return route(bundle.sp, dataset.inputs[te[i]])[0]

    def es_router(i):
        return baseline_es(bundle.cluster_means, dataset.inputs[te[i]])

    def ks_router(i):
        return baseline_ks(bundle.keyword_sets, token_lists[i])

    def gs_router(i):
        grad = model.example_grad(grad_params, dataset.inputs[te[i]], dataset.targets[te[i]])
        return baseline_gs(bundle.centroids, grad)

    routers = {"SP": sp_router, "ES": es_router, "KS": ks_router, "GS": gs_router}
    return evaluate_routers(routers, bundle.labels[te], bundle.centroids.k)


def run_simulate(
    config: SimConfig,
    tau_list: Sequence[float] = DEFAULT_TAU_LIST,
    k_range: Sequence[int] = DEFAULT_K_RANGE,
    batch_size: int = 32,
    beta: float = 0.9,
    alpha: int = 5,
    drift_tol: float = 1e-3,
    max_epochs: int = 50,
    n_pairs: int = 500,
) -> Tuple[dict, Dict[str, str]]:
    """Full loop: generate, warm up, extract, cluster, compare, route.

    Returns (consolidated report dict, named CSV payloads) where the CSVs
    hold the silhouette-vs-K grid and the similarity scatter for plotting.
    """
    model = config.build_model()
    dataset = gen_mixture(config)
    theta_w = warmup_train(
        model, dataset, config.warmup_fraction, config.warmup_steps,
        config.warmup_lr, config.seed,
    )
    records = gradient_records(model, theta_w, dataset)

    report, centroids0 = run_estimate_k(records, config.seed, tau_list, k_range)
    convergence, partition = run_cluster(
        records, centroids0, batch_size=batch_size, beta=beta, alpha=alpha,
        drift_tol=drift_tol, max_epochs=max_epochs,
    )
    analyze = run_analyze(partition, records)

    if config.num_tasks == 1:
        # Homogeneous control: the expert comparison uses fake uniform
        # clusters, the regime where splitting is performance-neutral.
        expert_partition = random_partition(dataset.ids, min(4, dataset.n), config.seed)
    else:
        expert_partition = partition
    expert_report = expert_vs_shared_experiment(config, partition=expert_partition)
    correlation = embedding_vs_gradient_correlation(dataset, model, theta_w, n_pairs, config.seed)

    bundle = build_router_bundle(dataset, partition, convergence.centroids, config.seed)
    router_eval = evaluate_router_bundle(bundle, dataset, model, theta_w)

    consolidated = {
        "config": {
            "seed": config.seed,
            "num_tasks": config.num_tasks,
            "model": config.model,
            "input_dim": config.input_dim,
            "examples_per_task": config.examples_per_task,
        },
        "chosen_K": report.chosen_K,
        "chosen_tau": report.chosen_tau,
        "chosen_subspace_dim": report.chosen_subspace_dim,
        "convergence": {
            "epochs_used": convergence.epochs_used,
            "converged": convergence.converged,
            "stop_reason": convergence.stop_reason,
            "drift_log": convergence.drift_log,
            "idle_clusters": convergence.idle_clusters,
        },
        "cluster_sizes": partition.cluster_sizes,
        "analysis": analyze,
        "expert_vs_shared": {
            "eps_shared": expert_report.eps_shared,
            "eps_cluster_weighted": expert_report.eps_cluster_weighted,
            "empirical_ratio": expert_report.empirical_ratio,
            "bound_ratio": expert_report.bound_ratio,
            "per_expert_eps": expert_report.per_expert_eps,
            "ratio_at_most_one": expert_report.ratio_at_most_one,
        },
        "correlation": {
            "pearson_r": correlation.pearson_r,
            "n_pairs": int(correlation.input_cosines.shape[0]),
        },
        "routers": {
            name: ev.to_dict() for name, ev in sorted(router_eval.items())
        },
    }
    csvs = {
        "silhouette_vs_k.csv": _silhouette_csv(report),
        "similarity_scatter.csv": _scatter_csv(correlation),
    }
    return consolidated, csvs


def _silhouette_csv(report: SpectralReport) -> str:
    buf = io.StringIO()
    buf.write("tau,subspace_dim,K,silhouette\n")
    for tau, sub_dim, K, score in report.candidates:
        buf.write(f"{tau},{sub_dim},{K},{score}\n")
    return buf.getvalue()


def _scatter_csv(correlation) -> str:
    buf = io.StringIO()
    buf.write("input_cosine,gradient_cosine\n")
    for a, b in zip(correlation.input_cosines, correlation.gradient_cosines):
        buf.write(f"{a},{b}\n")
    return buf.getvalue()


def load_records(path: str) -> List[GradientRecord]:
    """Materialize a stream file (either format) as a record list."""
    return list(read_stream(path))
