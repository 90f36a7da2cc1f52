"""Estimate the number of latent gradient clusters on a synthetic mixture.

Generates four gradient modes, sweeps explained-variance thresholds and
cluster counts, and shows that the silhouette peaks at the true K.
Saves the sweep as demos/out/silhouette_vs_k.png.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from gspace import GradientMatrix, select_k, unit_rows
from gspace.sim import fourmode_fixture, gen_mixture, gradient_records, warmup_train

cfg = fourmode_fixture(seed=0)
model = cfg.build_model()
dataset = gen_mixture(cfg)
print(f"mixture: {cfg.num_tasks} tasks x {cfg.examples_per_task} examples, d={cfg.input_dim}")

theta_w = warmup_train(
    model, dataset, cfg.warmup_fraction, cfg.warmup_steps, cfg.warmup_lr, cfg.seed
)
records = gradient_records(model, theta_w, dataset)
G = unit_rows(GradientMatrix.from_records(records))

report = select_k(G, (0.80, 0.85, 0.90, 0.95), range(2, 9), seed=cfg.seed)
print(f"\nexplained-variance curve (first 6): "
      f"{[(k, round(r, 3)) for k, r in report.explained_variance_curve[:6]]}")
print(f"chosen: K={report.chosen_K} at tau={report.chosen_tau} "
      f"(subspace dim {report.chosen_subspace_dim})")

print("\nsilhouette grid:")
for tau, sub_dim, K, score in report.candidates:
    marker = " <-- chosen" if (tau, K) == (report.chosen_tau, report.chosen_K) else ""
    print(f"  tau={tau:.2f} dim={sub_dim} K={K}: {score:.4f}{marker}")

os.makedirs("demos/out", exist_ok=True)
fig, ax = plt.subplots(figsize=(6, 4))
for tau in sorted({c[0] for c in report.candidates}):
    ks = [c[2] for c in report.candidates if c[0] == tau]
    scores = [c[3] for c in report.candidates if c[0] == tau]
    ax.plot(ks, scores, marker="o", label=f"tau={tau}")
ax.axvline(report.chosen_K, color="gray", linestyle="--", alpha=0.6)
ax.set_xlabel("cluster count K")
ax.set_ylabel("silhouette")
ax.legend()
fig.tight_layout()
fig.savefig("demos/out/silhouette_vs_k.png", dpi=120)
print("\nwrote demos/out/silhouette_vs_k.png")
