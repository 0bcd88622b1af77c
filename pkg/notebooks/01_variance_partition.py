"""Variance partitioning for multilevel count models.

Walks through the closed-form statistics for the four response families:
the marginal mean, the marginal variance split by level, and the VPCs.
Run with ``python3 notebooks/01_variance_partition.py``.
"""

# %% Two-level Poisson and negative binomial random-intercept models
import numpy as np

from countvpc.model import Alpha, Delta, FixedEffects, LognormalSigma2e, ModelFamily, ModelSpec, RandomIntercept
from countvpc.presets import model1, model2, model3
from countvpc.stats import marginal_stats

for name, spec in (("Poisson", model1()), ("NB2", model2())):
    s = marginal_stats(spec)
    print(f"{name:<8} mean {s.mu_m:7.3f}  variance {s.variance:8.3f}  "
          f"level-2 {s.comp_l2:6.3f}  level-1 {s.comp_l1:7.3f}  VPC2 {s.vpc2:.3f}")

# The Poisson VPC is large because its level-1 variance is only the mean.
# Allowing overdispersion moves most of the variance to the student level.

# %% Three levels: districts, schools, students
s = marginal_stats(model3())
print(f"\nthree-level NB2: VPC3 {s.vpc3:.5f}  VPC2 {s.vpc2:.5f}  VPC1 {s.vpc1:.5f}")
print(f"share attributable to districts and schools together: {s.vpc23:.4f}")

# %% The same variance function under every family
# The level-2 component is family-free given the marginal mean, while the
# level-1 component carries each family's overdispersion.
beta0, s2 = 2.0, 0.1
families = {
    "poisson": None,
    "nb2": Alpha(0.8),
    "nb1": Delta(0.8),
    "poisson_lognormal": LognormalSigma2e(np.log1p(0.8)),
}
print()
for fam, disp in families.items():
    s = marginal_stats(ModelSpec(ModelFamily(fam), FixedEffects([beta0]), RandomIntercept(s2), disp))
    print(f"{fam:<18} mean {s.mu_m:6.3f}  level-1 {s.comp_l1:7.3f}  VPC2 {s.vpc2:.4f}")

# %% VPC against the marginal mean
# Count-model VPCs depend on the mean: more counts, more signal relative to
# Poisson noise.
print("\nmean    VPC2 (alpha=0)  VPC2 (alpha=0.8)")
for b in np.log([1, 2, 5, 10, 20]):
    p = marginal_stats(ModelSpec(ModelFamily.POISSON, FixedEffects([b]), RandomIntercept(s2)))
    n = marginal_stats(ModelSpec(ModelFamily.NB2, FixedEffects([b]), RandomIntercept(s2), Alpha(0.8)))
    print(f"{p.mu_m:5.2f}   {p.vpc2:.4f}          {n.vpc2:.4f}")
