"""Statistics that vary with covariates.

With covariates, and with a random slope, every student has their own
marginal mean, variance split and VPC.  This script compares a reference
student with one eligible for free school meals (FSM), then profiles a
small synthetic cohort.
"""

# %% Reference and FSM students under the random-intercept and random-slope models
import numpy as np

from countvpc.data import Dataset
from countvpc.model import cluster_variance_function
from countvpc.presets import COVARIATES, model4, model5
from countvpc.stats import incidence_rate_ratio, marginal_stats, reference_row, stats_profile

for label, spec in (("random intercept", model4()), ("random FSM slope", model5())):
    for row in ({}, {"fsm": 1.0}):
        eta, z = reference_row(spec, **row)
        s = marginal_stats(spec, eta, z)
        who = "FSM" if row else "reference"
        print(f"{label:<17} {who:<9} mean {s.mu_m:6.2f}  variance {s.variance:7.2f}  VPC2 {s.vpc2:.3f}")

fsm = model5().fixed.beta[COVARIATES.index("fsm")]
print(f"\nFSM incidence-rate ratio: {incidence_rate_ratio(fsm):.2f}")

# %% The cluster variance function
# With a random FSM slope the between-school variance is z' Omega z.
omega = model5().random
print(f"school variance, non-FSM {cluster_variance_function(omega, [1, 0]):.4f}, "
      f"FSM {cluster_variance_function(omega, [1, 1]):.4f}")

# %% A per-student profile
rng = np.random.default_rng(3)
n = 1000
covariates = {name: np.zeros(n) for name in COVARIATES[1:]}
quintile = rng.integers(1, 6, n)
for q in range(2, 6):
    covariates[f"quintile{q}"] = (quintile == q).astype(float)
covariates["fsm"] = rng.binomial(1, 0.3, n).astype(float)
covariates["female"] = rng.binomial(1, 0.5, n).astype(float)
cohort = Dataset(y=np.zeros(n, dtype=int), cluster=np.arange(n) // 25, covariates=covariates)

profile = stats_profile(model5(), cohort)
for field in ("mu_m", "vpc2"):
    f = profile.summary[field]
    print(f"{field:<12} mean {f.mean:.3f}  quartiles {f.q1:.3f} / {f.median:.3f} / {f.q3:.3f}")

# Plot-ready output (one row per student): profile.to_csv("profile.csv")
