"""Fitting a two-level negative binomial model and predicting school effects.

Simulate a dataset the size of the absenteeism application (434 schools,
about 154 students each), fit it by maximum likelihood with adaptive
quadrature, and feed the estimates back into the statistics.
"""

# %% Simulate and fit
import numpy as np

from countvpc.fit import fit_ml, lr_test, predict_random_effects
from countvpc.presets import model2
from countvpc.simulate import SimConfig, simulate_dataset
from countvpc.stats import marginal_stats

truth = model2()
sizes = np.random.default_rng(0).integers(77, 232, 434)
data = simulate_dataset(truth, SimConfig(n_clusters=434, n_units=sizes, seed=2020))

nb2 = fit_ml(data, "nb2")
est, se = nb2.estimates(), nb2.standard_errors()
print("parameter   estimate   s.e.     truth")
for name, t in (("_cons", 2.088), ("sigma2_u", 0.093), ("alpha", 0.877)):
    print(f"{name:<10} {est[name]:9.4f} {se[name]:7.4f} {t:9.3f}")
print(f"deviance {nb2.deviance:.2f}, converged {nb2.converged}")

# %% Poisson against negative binomial
# The Poisson model is nested at alpha = 0, a boundary value, so the naive
# chi-square p-value is conservative.
pois = fit_ml(data, "poisson")
test = lr_test(pois.log_likelihood, nb2.log_likelihood, df=1, variance_parameter=True)
print(test)

# %% VPC implied by the fit
s = marginal_stats(nb2.to_spec())
print(f"fitted VPC2 {s.vpc2:.4f} vs true {marginal_stats(truth).vpc2:.4f}")

# %% Empirical Bayes predictions of the school effects
u_hat = predict_random_effects(data, nb2)
order = np.argsort(u_hat)
print("lowest three schools:", np.round(u_hat[order[:3]], 3))
print("highest three schools:", np.round(u_hat[order[-3:]], 3))
