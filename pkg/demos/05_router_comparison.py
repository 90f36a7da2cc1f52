"""Compare the four routing strategies on a held-out split.

The trained linear-softmax head (SP) is scored against cosine-to-mean
features (ES), keyword overlap (KS), and fresh-gradient matching (GS).
GS pays a per-query gradient computation, which dominates its latency.
"""

from gspace.pipeline import build_router_bundle, evaluate_router_bundle
from gspace.sim import (
    discover_partition,
    gen_mixture,
    gradient_records,
    router_ordering_fixture,
    warmup_train,
)

cfg = router_ordering_fixture(seed=0)
model = cfg.build_model()
dataset = gen_mixture(cfg)
theta_w = warmup_train(
    model, dataset, cfg.warmup_fraction, cfg.warmup_steps, cfg.warmup_lr, cfg.seed
)
records = gradient_records(model, theta_w, dataset)
_, convergence, partition = discover_partition(records, cfg.seed, k_range=range(2, 9))
print(f"discovered {partition.K} clusters, sizes {partition.cluster_sizes}")

bundle = build_router_bundle(dataset, partition, convergence.centroids, cfg.seed)
evals = evaluate_router_bundle(bundle, dataset, model, theta_w)

print(f"\n{'router':8s} {'accuracy':>9s} {'latency_ms':>11s}")
for name in ("SP", "ES", "GS", "KS"):
    ev = evals[name]
    print(f"{name:8s} {ev.accuracy:9.3f} {ev.latency_ms:11.4f}")
print("\nSP confusion matrix (rows = true cluster):")
for row in evals["SP"].confusion:
    print("  " + " ".join(f"{v:3d}" for v in row))
