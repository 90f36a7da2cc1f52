"""Input similarity is a poor proxy for gradient similarity.

On the sign-ambiguous mixture, pairs with near-identical gradients can have
opposite inputs, so the two cosine lists barely correlate. The control
dataset (gradients are positive multiples of inputs) correlates perfectly.
Saves demos/out/similarity_scatter.png.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from gspace.sim import (
    embedding_vs_gradient_correlation,
    fourmode_fixture,
    gen_mixture,
    negative_control_fixture,
    warmup_train,
)


def run(cfg):
    model = cfg.build_model()
    dataset = gen_mixture(cfg)
    theta_w = warmup_train(
        model, dataset, cfg.warmup_fraction, cfg.warmup_steps, cfg.warmup_lr, cfg.seed
    )
    return embedding_vs_gradient_correlation(dataset, model, theta_w, 500, cfg.seed)


interference = run(fourmode_fixture(seed=0))
control = run(negative_control_fixture(seed=0))
print(f"interference mixture: pearson r = {interference.pearson_r:+.4f}")
print(f"aligned control:      pearson r = {control.pearson_r:+.4f}")

os.makedirs("demos/out", exist_ok=True)
fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharex=True, sharey=True)
for ax, result, title in (
    (axes[0], interference, f"interference (r={interference.pearson_r:+.2f})"),
    (axes[1], control, f"aligned control (r={control.pearson_r:+.2f})"),
):
    ax.scatter(result.input_cosines, result.gradient_cosines, s=6, alpha=0.5)
    ax.set_title(title)
    ax.set_xlabel("input cosine")
axes[0].set_ylabel("gradient cosine")
fig.tight_layout()
fig.savefig("demos/out/similarity_scatter.png", dpi=120)
print("wrote demos/out/similarity_scatter.png")
