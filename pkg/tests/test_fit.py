import json

import numpy as np
import pytest
from scipy import stats

from countvpc.data import Dataset
from countvpc.fit import (
    FitOptions,
    fit_ml,
    lr_test,
    lr_test_statistic,
    poisson_irls,
    predict_random_effects,
    total_loglik,
)
from countvpc.likelihood import poisson_logpmf
from countvpc.model import ModelFamily, ModelSpec

TRUTH = {"_cons": 2.088, "sigma2_u": 0.093, "alpha": 0.877}


def two_level_counts(seed, clusters=434, mean_size=154, beta0=2.088, sigma2_u=0.093, alpha=0.877, x_coef=None):
    """Independent generator for NB2/Poisson random-intercept data; returns (dataset, u)."""
    rng = np.random.default_rng(seed)
    sizes = rng.integers(mean_size // 2, 3 * mean_size // 2 + 1, clusters)
    cluster = np.repeat(np.arange(clusters), sizes)
    u = rng.normal(0.0, np.sqrt(sigma2_u), clusters)
    eta = beta0 + u[cluster]
    covariates = {}
    if x_coef is not None:
        x = rng.binomial(1, 0.4, cluster.size).astype(float)
        eta = eta + x_coef * x
        covariates["x"] = x
    mu = np.exp(eta)
    if alpha > 0:
        mu = mu * rng.gamma(1.0 / alpha, alpha, cluster.size)
    return Dataset(y=rng.poisson(mu), cluster=cluster, covariates=covariates), u


@pytest.fixture(scope="module")
def round_trip():
    data, u = two_level_counts(seed=5)
    return data, u, fit_ml(data, "nb2")


def test_round_trip_within_three_se(round_trip):
    _, _, fit = round_trip
    assert fit.converged
    est, se = fit.estimates(), fit.standard_errors()
    for name, truth in TRUTH.items():
        assert abs(est[name] - truth) < 3 * se[name], name
    assert est["sigma2_u"] == pytest.approx(TRUTH["sigma2_u"], rel=0.25)


def test_standard_errors_match_numerical_information(round_trip):
    data, _, fit = round_trip
    # independent check of the sigma2_u SE: curvature of the profile-free
    # log-likelihood along sigma2_u on the natural scale
    spec = fit.to_spec()
    h = 1e-3 * fit.sigma2_u

    def ll(s2):
        d = spec.to_dict()
        d["random"]["sigma2_u"] = s2
        return total_loglik(data, ModelSpec.from_dict(d))

    curv = (ll(fit.sigma2_u + h) - 2 * ll(fit.sigma2_u) + ll(fit.sigma2_u - h)) / h**2
    # the marginal SE is at least the conditional one
    assert fit.se_sigma2_u >= np.sqrt(-1 / curv) * 0.99


def test_deviance_and_loglik(round_trip):
    data, _, fit = round_trip
    assert fit.deviance == -2 * fit.log_likelihood
    assert fit.log_likelihood == pytest.approx(total_loglik(data, fit.to_spec()), rel=1e-12)


def test_more_nodes_barely_move_loglik(round_trip):
    data, _, fit = round_trip
    assert abs(total_loglik(data, fit.to_spec(), n_nodes=15) - fit.log_likelihood) < 1e-4


def test_refit_with_fifteen_nodes(round_trip):
    data, _, fit = round_trip
    refit = fit_ml(data, "nb2", FitOptions(n_quad_nodes=15))
    assert abs(refit.log_likelihood - fit.log_likelihood) < 1e-4


def test_empirical_bayes_tracks_true_effects(round_trip):
    data, u, fit = round_trip
    u_hat = predict_random_effects(data, fit)
    np.testing.assert_array_equal(u_hat, fit.u_hat)
    assert np.corrcoef(u_hat, u)[0, 1] > 0.8
    # shrinkage: predictions are less dispersed than the truth
    assert u_hat.var() < u.var()


def test_fit_serializes_to_params_schema(round_trip):
    _, _, fit = round_trip
    doc = json.loads(json.dumps(fit.to_dict()))
    spec = ModelSpec.from_dict(doc)
    assert spec.family is ModelFamily.NB2
    assert spec.random.sigma2_u == pytest.approx(fit.sigma2_u)
    inf = doc["inference"]
    assert inf["converged"] and inf["nodes"] == 7
    assert set(inf["se"]) == {"beta", "sigma2_u", "alpha"}


def test_boundary_recovery_poisson():
    data, _ = two_level_counts(seed=8, clusters=50, mean_size=20, beta0=1.0, sigma2_u=0.0, alpha=0.0)
    fit = fit_ml(data, "poisson")
    assert fit.sigma2_u < 0.01
    x = np.ones((data.n_obs, 1))
    beta = poisson_irls(x, data.y)
    ll_fixed = poisson_logpmf(data.y, np.exp(beta[0])).sum()
    assert abs(fit.log_likelihood - ll_fixed) < 0.5


def test_nb2_at_tiny_alpha_matches_poisson():
    data, _ = two_level_counts(seed=3, clusters=60, mean_size=30, alpha=0.0, x_coef=0.3)
    pois = fit_ml(data, "poisson")
    nb = fit_ml(data, "nb2", FitOptions(fixed_alpha=1e-12))
    np.testing.assert_allclose(nb.beta, pois.beta, atol=1e-5)
    assert nb.sigma2_u == pytest.approx(pois.sigma2_u, abs=1e-5)
    assert nb.alpha == 1e-12 and nb.se_alpha is None


def test_covariate_recovery():
    data, _ = two_level_counts(seed=4, clusters=120, mean_size=40, x_coef=0.377)
    fit = fit_ml(data, "nb2")
    est, se = fit.estimates(), fit.standard_errors()
    assert fit.covariate_names == ("_cons", "x")
    assert abs(est["x"] - 0.377) < 3 * se["x"]


def test_irls_matches_glm_score():
    rng = np.random.default_rng(1)
    x = np.column_stack([np.ones(500), rng.normal(size=500)])
    y = rng.poisson(np.exp(0.5 + 0.3 * x[:, 1]))
    beta = poisson_irls(x, y)
    # score equations of the Poisson GLM vanish at the MLE
    np.testing.assert_allclose(x.T @ (y - np.exp(x @ beta)), 0.0, atol=1e-8)


def test_unsupported_family():
    data, _ = two_level_counts(seed=1, clusters=5, mean_size=4)
    with pytest.raises(ValueError):
        fit_ml(data, "nb1")


def test_fit_options_validation():
    with pytest.raises(ValueError):
        FitOptions(n_quad_nodes=0)
    with pytest.raises(ValueError):
        FitOptions(tol=0)


# -- likelihood-ratio tests -------------------------------------------------------


def test_lr_equal_logliks():
    t = lr_test(-100.0, -100.0, 1)
    assert t.statistic == 0.0 and t.p_value == 1.0


def test_lr_published_statistics():
    assert lr_test_statistic(170.0, 2).p_value < 0.001
    assert lr_test_statistic(7.29, 1).p_value < 0.01


def test_lr_p_value_is_chi2_tail():
    t = lr_test(-120.0, -116.5, 2)
    assert t.statistic == pytest.approx(7.0)
    assert t.p_value == pytest.approx(stats.chi2.sf(7.0, 2), rel=1e-14)


def test_lr_boundary_flag():
    assert lr_test(-10.0, -9.0, 1, variance_parameter=True).boundary_caveat
    assert not lr_test(-10.0, -9.0, 1).boundary_caveat
    assert "conservative" in str(lr_test(-10.0, -9.0, 1, variance_parameter=True))


def test_lr_errors():
    with pytest.raises(ValueError):
        lr_test(-10.0, -9.0, 0)
    with pytest.raises(ValueError):
        lr_test(-10.0, -11.0, 1)
