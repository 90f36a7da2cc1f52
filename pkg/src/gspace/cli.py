"""Command-line surface for the gradient-space clustering pipeline.

Exit codes: 0 success, 2 usage/validation error, 3 degenerate data.
stdout carries machine-readable JSON payloads; stderr carries messages.
A single JSON config file can set every knob; explicit flags override the
config, and the environment variable GSPACE_SEED overrides both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence, Tuple

import numpy as np

from .analysis import FlopsModel, flops_estimate, tfidf_summarize
from .core import DegenerateDataError, GspaceError
from .online import Partition
from .pipeline import (
    load_records,
    run_analyze,
    run_cluster,
    run_estimate_k,
    run_simulate,
)
from .router import RouterModel, route, train_router
from .online import final_assignment
from .sim import (
    DEFAULT_TAU_LIST,
    SimConfig,
    fourmode_fixture,
    heterogeneous_fixture,
    homogeneous_fixture,
    negative_control_fixture,
    router_ordering_fixture,
    router_separable_fixture,
)
from .spectral import CentroidSet
from .streams import read_matrix

FIXTURES = {
    "heterogeneous": heterogeneous_fixture,
    "homogeneous": homogeneous_fixture,
    "fourmode": fourmode_fixture,
    "negative-control": negative_control_fixture,
    "router-ordering": router_ordering_fixture,
    "router-separable": router_separable_fixture,
}


@dataclass(frozen=True)
class RunConfig:
    """Pipeline hyperparameters, loadable from one JSON document."""

    seed: int = 0
    tau_list: Tuple[float, ...] = tuple(DEFAULT_TAU_LIST)
    k_range: Tuple[int, int] = (2, 10)
    alpha: int = 5
    beta: float = 0.9
    batch_size: int = 32
    drift_tol: float = 1e-3
    max_epochs: int = 50
    warmup_fraction: float = 0.05
    top_m: int = 8
    sim: dict = field(default_factory=dict)

    def k_values(self) -> range:
        lo, hi = self.k_range
        if lo > hi:
            raise GspaceError(f"k_range minimum {lo} exceeds maximum {hi}")
        return range(lo, hi + 1)

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise GspaceError(f"unknown config key {unknown[0]!r}")
        kwargs = dict(obj)
        if "tau_list" in kwargs:
            kwargs["tau_list"] = tuple(float(t) for t in kwargs["tau_list"])
        if "k_range" in kwargs:
            lo, hi = kwargs["k_range"]
            kwargs["k_range"] = (int(lo), int(hi))
        return cls(**kwargs)


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def _log(message: str) -> None:
    sys.stderr.write(message + "\n")


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if isinstance(payload, str):
            fh.write(payload)
            if not payload.endswith("\n"):
                fh.write("\n")
        else:
            fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _effective_seed(args, config: RunConfig) -> int:
    env = os.environ.get("GSPACE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise GspaceError(f"GSPACE_SEED must be an integer, got {env!r}") from exc
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return config.seed


def _sim_config(args, config: RunConfig, seed: int) -> SimConfig:
    fixture = FIXTURES[getattr(args, "fixture", "heterogeneous")]
    overrides = dict(config.sim)
    overrides.pop("seed", None)
    try:
        return fixture(seed=seed, **overrides)
    except TypeError as exc:
        raise GspaceError(f"invalid sim config: {exc}") from exc


def cmd_estimate_k(args) -> int:
    config = RunConfig.load(args.config)
    seed = _effective_seed(args, config)
    records = load_records(args.input)
    report, centroids = run_estimate_k(records, seed, config.tau_list, config.k_values())
    _write_json(args.report, report.to_json())
    centroids.save(args.centroids)
    _log(f"chose K={report.chosen_K} (tau={report.chosen_tau}) from {len(records)} gradients")
    _emit(
        {
            "chosen_K": report.chosen_K,
            "chosen_tau": report.chosen_tau,
            "chosen_subspace_dim": report.chosen_subspace_dim,
            "report": args.report,
            "centroids": args.centroids,
        }
    )
    return 0


def cmd_cluster(args) -> int:
    config = RunConfig.load(args.config)
    records = load_records(args.input)
    if not records:
        raise DegenerateDataError("empty gradient stream")
    centroids = CentroidSet.load(args.centroids)
    convergence, partition = run_cluster(
        records,
        centroids,
        batch_size=config.batch_size,
        beta=config.beta,
        alpha=config.alpha,
        drift_tol=config.drift_tol,
        max_epochs=config.max_epochs,
    )
    convergence.centroids.save(args.final_centroids)
    # Re-assign against the reloaded checkpoint so the written partition is
    # exactly reproducible from the written artifacts (float32 on disk).
    partition = final_assignment(records, CentroidSet.load(args.final_centroids))
    partition.to_jsonl(args.partition)
    _log(
        f"{convergence.stop_reason}; epochs={convergence.epochs_used}; "
        f"sizes={partition.cluster_sizes}"
    )
    _emit(
        {
            "converged": convergence.converged,
            "epochs_used": convergence.epochs_used,
            "drift_log": convergence.drift_log,
            "idle_clusters": convergence.idle_clusters,
            "cluster_sizes": partition.cluster_sizes,
            "partition": args.partition,
            "final_centroids": args.final_centroids,
        }
    )
    return 0


def cmd_assign(args) -> int:
    records = load_records(args.input)
    if not records:
        raise DegenerateDataError("empty gradient stream")
    centroids = CentroidSet.load(args.centroids)
    partition = final_assignment(records, centroids)
    partition.to_jsonl(args.partition)
    _emit({"cluster_sizes": partition.cluster_sizes, "partition": args.partition})
    return 0


def cmd_analyze(args) -> int:
    config = RunConfig.load(args.config)
    records = load_records(args.input)
    if not records:
        raise DegenerateDataError("empty gradient stream")
    partition = Partition.from_jsonl(args.partition)
    payload = run_analyze(partition, records, top_m=config.top_m)
    if args.output:
        _write_json(args.output, payload)
    violations = payload["per_cluster_variance_exceeds_total"]
    if violations:
        _log(f"per-cluster variance exceeds the total for clusters {violations}")
    _log(f"stationarity ratio = {payload['stationarity_ratio']:.6f}")
    _emit(payload)
    return 0


def cmd_simulate(args) -> int:
    config = RunConfig.load(args.config)
    seed = _effective_seed(args, config)
    sim_cfg = _sim_config(args, config, seed)
    report, csvs = run_simulate(
        sim_cfg,
        tau_list=config.tau_list,
        k_range=config.k_values(),
        batch_size=config.batch_size,
        beta=config.beta,
        alpha=config.alpha,
        drift_tol=config.drift_tol,
        max_epochs=config.max_epochs,
    )
    if not args.measure_latency:
        for entry in report["routers"].values():
            entry.pop("latency_ms", None)
    if args.report:
        _write_json(args.report, report)
    if args.csv_dir:
        os.makedirs(args.csv_dir, exist_ok=True)
        for name, payload in csvs.items():
            with open(os.path.join(args.csv_dir, name), "w", encoding="utf-8") as fh:
                fh.write(payload)
    _emit(report)
    return 0


def cmd_train_router(args) -> int:
    config = RunConfig.load(args.config)
    seed = _effective_seed(args, config)
    features = read_matrix(args.features)
    partition = Partition.from_jsonl(args.partition)
    labels = partition.labels_for(features.ids)
    model = train_router(
        features.rows,
        labels,
        epochs=args.epochs,
        lr=args.lr,
        seed=seed,
        num_classes=partition.K,
    )
    _write_json(args.model, json.loads(model.to_json()))
    _log(f"router trained: K={model.num_experts}, f={model.feature_dim}")
    _emit(
        {
            "model": args.model,
            "K": model.num_experts,
            "feature_dim": model.feature_dim,
            "final_ce": model.metadata["final_ce"],
        }
    )
    return 0


def cmd_route(args) -> int:
    with open(args.model, "r", encoding="utf-8") as fh:
        try:
            model = RouterModel.from_json(fh.read())
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise GspaceError(f"corrupted router model file: {exc}") from exc
    if args.feature is not None:
        feature = np.asarray(json.loads(args.feature), dtype=np.float64)
    else:
        with open(args.feature_file, "r", encoding="utf-8") as fh:
            feature = np.asarray(json.load(fh), dtype=np.float64)
    expert, probs = route(model, feature)
    _emit({"expert": expert, "probabilities": probs.tolist()})
    return 0


def cmd_summarize_clusters(args) -> int:
    config = RunConfig.load(args.config)
    records = load_records(args.input)
    partition = Partition.from_jsonl(args.partition)
    texts = {rec.id: rec.text for rec in records if rec.text}
    if not texts:
        raise DegenerateDataError("no text payloads in the stream")
    summary = tfidf_summarize(partition, texts, top_m=config.top_m)
    payload = {str(k): [[t, w] for t, w in terms] for k, terms in summary.items()}
    if args.output:
        _write_json(args.output, payload)
    _emit(payload)
    return 0


def cmd_flops(args) -> int:
    if min(args.f_base, args.f_lora, args.f_sp) < 0 or args.k < 0:
        raise GspaceError("FLOPs inputs must be nonnegative")
    model = FlopsModel(f_base=args.f_base, f_lora=args.f_lora, f_sp=args.f_sp, k=args.k)
    rows = {}
    for method in ("ensemble", "routed"):
        router_flops, total = flops_estimate(model, method)
        rows[method] = {"router_flops": _as_number(router_flops), "total_flops": _as_number(total)}
    ensemble_total = rows["ensemble"]["total_flops"]
    routed_total = rows["routed"]["total_flops"]
    if routed_total > 0:
        rows["total_ratio"] = ensemble_total / routed_total
    else:
        rows["total_ratio"] = None
        _log("ratio undefined: zero total FLOPs")
    # the head-vs-adapter cost gap is reported, never enforced
    rows["sp_over_lora"] = args.f_sp / args.f_lora if args.f_lora > 0 else None
    _emit(rows)
    return 0


def _as_number(x: float):
    return int(x) if float(x).is_integer() else float(x)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gspace",
        description="Gradient-space clustering, routing, and SGD diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="JSON run-config file")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("estimate-k", help="estimate K by SVD + silhouette sweep")
    p.add_argument("--input", required=True, help="gradient stream (.gsg or .jsonl)")
    p.add_argument("--report", required=True, help="output SpectralReport JSON")
    p.add_argument("--centroids", required=True, help="output centroid checkpoint (.gsg)")
    common(p)
    p.set_defaults(func=cmd_estimate_k)

    p = sub.add_parser("cluster", help="refine centroids online and assign the stream")
    p.add_argument("--input", required=True)
    p.add_argument("--centroids", required=True, help="initial centroid checkpoint")
    p.add_argument("--partition", required=True, help="output partition JSON-lines")
    p.add_argument("--final-centroids", required=True, help="output refined checkpoint")
    common(p, seed=False)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("assign", help="single-pass assignment against a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--centroids", required=True)
    p.add_argument("--partition", required=True)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("analyze", help="variance decomposition and stationarity ratio")
    p.add_argument("--input", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--output", help="optional output JSON path")
    common(p, seed=False)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="full synthetic end-to-end experiment")
    p.add_argument("--fixture", choices=sorted(FIXTURES), default="heterogeneous")
    p.add_argument("--report", help="output consolidated JSON report")
    p.add_argument("--csv-dir", help="directory for plot-ready CSVs")
    p.add_argument(
        "--measure-latency",
        action="store_true",
        help="include wall-clock router latencies (non-deterministic)",
    )
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-router", help="fit the linear-softmax router head")
    p.add_argument("--features", required=True, help="feature stream (.gsg or .jsonl)")
    p.add_argument("--partition", required=True, help="partition JSON-lines (labels)")
    p.add_argument("--model", required=True, help="output router model JSON")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    common(p)
    p.set_defaults(func=cmd_train_router)

    p = sub.add_parser("route", help="route one feature vector to an expert")
    p.add_argument("--model", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--feature", help="inline JSON array")
    group.add_argument("--feature-file", help="file holding a JSON array")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("summarize-clusters", help="per-cluster TF-IDF keyword summary")
    p.add_argument("--input", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--output", help="optional output JSON path")
    common(p, seed=False)
    p.set_defaults(func=cmd_summarize_clusters)

    p = sub.add_parser("flops", help="per-query FLOPs comparison of routing schemes")
    p.add_argument("f_base", type=float)
    p.add_argument("f_lora", type=float)
    p.add_argument("f_sp", type=float)
    p.add_argument("k", type=int)
    p.set_defaults(func=cmd_flops)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help; pass both through
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DegenerateDataError as exc:
        _log(f"error: {exc}")
        return 3
    except (GspaceError, OSError, json.JSONDecodeError, ValueError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
