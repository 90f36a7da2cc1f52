"""Numerical checks of the variance decomposition results.

Three exhibits: the mixture-variance identity holds to round-off on shared
samples, the law of total variance splits exactly into within/between
terms, and the within/total ratio falls as the modes separate.
"""

import numpy as np

from gspace import GradientMatrix
from gspace.analysis import (
    mixture_variance_check,
    stationarity_ratio,
    total_variance_decomposition,
)
from gspace.online import Partition

rng = np.random.default_rng(0)

# 1. mixture-variance identity on one paired sample
shared = rng.standard_normal((500, 16))
subsets = [rng.uniform(-2, 2) * shared + rng.standard_normal((500, 16)) for _ in range(4)]
alphas = rng.dirichlet(np.ones(4))
result = mixture_variance_check(subsets, alphas)
print("mixture-variance identity (k=4, d=16, 500 paired draws):")
print(f"  lhs={result.lhs:.12f}  rhs={result.rhs:.12f}  rel err={result.relative_error:.2e}")

# 2. law of total variance on a random partition
rows = rng.standard_normal((300, 8)) * 2.5
G = GradientMatrix(rows=rows, ids=np.arange(300))
labels = rng.integers(0, 5, size=300)
part = Partition(
    assignments={i: (int(labels[i]), 1.0) for i in range(300)},
    cluster_sizes=[int(np.sum(labels == k)) for k in range(5)],
    K=5,
)
report = total_variance_decomposition(part, G)
print("\nlaw of total variance (random 5-way partition):")
print(f"  within={report.within_term:.6f}  between={report.between_term:.6f}")
print(f"  total={report.total_variance:.6f}  "
      f"identity gap={abs(report.within_term + report.between_term - report.total_variance):.2e}")

# 3. the within/total ratio shrinks as cluster means separate
print("\nstationarity ratio vs mode separation:")
for sep in (0.0, 1.0, 3.0, 9.0):
    a = rng.standard_normal((150, 6))
    b = rng.standard_normal((150, 6)) + sep
    G2 = GradientMatrix(rows=np.vstack([a, b]), ids=np.arange(300))
    part2 = Partition(
        assignments={i: (0 if i < 150 else 1, 1.0) for i in range(300)},
        cluster_sizes=[150, 150],
        K=2,
    )
    ratio = stationarity_ratio(total_variance_decomposition(part2, G2))
    print(f"  separation {sep:4.1f}: within/total = {ratio:.4f}")
