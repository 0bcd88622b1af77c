import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countvpc.data import Dataset
from countvpc.model import (
    Alpha,
    Delta,
    FixedEffects,
    LevelStructure,
    LognormalSigma2e,
    ModelFamily,
    ModelSpec,
    RandomCoefficient,
    RandomIntercept,
)
from countvpc.presets import COVARIATES, model1, model2, model3, model4, model5
from countvpc.stats import (
    conditional_stats,
    incidence_rate_ratio,
    marginal_expectation,
    marginal_stats,
    reference_row,
    stats_profile,
    variance_components,
)

GH_X, GH_W = np.polynomial.hermite_e.hermegauss(201)
GH_W = GH_W / GH_W.sum()


def _spec(family, beta0=2.0, s2=0.1, disp=None, **kw):
    dispersion = {
        ModelFamily.POISSON: None,
        ModelFamily.NB2: Alpha,
        ModelFamily.NB1: Delta,
        ModelFamily.POISSON_LOGNORMAL: LognormalSigma2e,
    }[family]
    return ModelSpec(family, FixedEffects([beta0]), RandomIntercept(s2),
                     None if dispersion is None else dispersion(disp), **kw)


def _oracle_moments(spec, eta):
    """E(y) and Var(y) by integrating the conditional moments over u (and v)."""
    s2 = spec.random.sigma2_u
    sv = spec.sigma2_v or 0.0
    u = np.sqrt(s2) * GH_X
    v = np.sqrt(sv) * GH_X if sv else np.zeros(1)
    wv = GH_W if sv else np.ones(1)
    re = v[:, None] + u[None, :]
    w = wv[:, None] * GH_W[None, :]
    d = spec.dispersion_value
    cond = conditional_stats(spec.family, 0.0, d)
    mu_c = np.exp(eta + re) * cond.mu_c
    omega_c = mu_c * (cond.omega_c / cond.mu_c) if spec.family is not ModelFamily.NB2 else mu_c + mu_c**2 * d
    if spec.family is ModelFamily.POISSON_LOGNORMAL:
        omega_c = mu_c + mu_c**2 * np.expm1(d)
    mean = np.sum(w * mu_c)
    var = np.sum(w * omega_c) + np.sum(w * (mu_c - mean) ** 2)
    return mean, var


# -- conditional moments ------------------------------------------------------


def test_conditional_poisson():
    c = conditional_stats(ModelFamily.POISSON, np.log(5.0))
    assert c.mu_c == pytest.approx(5.0, rel=1e-15) and c.omega_c == c.mu_c


def test_conditional_nb2():
    c = conditional_stats(ModelFamily.NB2, np.log(5.0), 0.877)
    assert c.omega_c == pytest.approx(26.925, rel=1e-12)


def test_conditional_nb1():
    assert conditional_stats(ModelFamily.NB1, np.log(5.0), 0.5).omega_c == pytest.approx(7.5, rel=1e-12)


def test_conditional_lognormal():
    c = conditional_stats(ModelFamily.POISSON_LOGNORMAL, 0.3, 0.2)
    mu = np.exp(0.3 + 0.1)
    assert c.mu_c == pytest.approx(mu, rel=1e-14)
    assert c.omega_c == pytest.approx(mu + mu**2 * np.expm1(0.2), rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(list(ModelFamily)), st.floats(-5, 5), st.floats(0, 3))
def test_conditional_variance_at_least_mean(family, eta, d):
    c = conditional_stats(family, eta, 0.0 if family is ModelFamily.POISSON else d)
    assert c.omega_c >= c.mu_c * (1 - 1e-15)


def test_range_error():
    with pytest.raises(OverflowError):
        conditional_stats(ModelFamily.POISSON, 701.0)
    with pytest.raises(OverflowError):
        marginal_expectation(_spec(ModelFamily.POISSON, beta0=699.0, s2=4.0), 699.0)


# -- marginal moments against published values ---------------------------------


def test_marginal_expectation_model1():
    assert marginal_expectation(model1(), 2.085) == pytest.approx(8.457, abs=5e-4)


def test_marginal_expectation_model3():
    assert marginal_expectation(model3(), 2.0860497) == pytest.approx(8.4353062, rel=1e-7)


def test_marginal_expectation_identity():
    assert marginal_expectation(_spec(ModelFamily.POISSON, 0.0, 0.0), 0.0) == 1.0


def test_components_model2():
    spec = model2()
    mu = marginal_expectation(spec, 2.088)
    l3, l2, l1 = variance_components(spec, mu)
    assert l3 == 0.0
    # rounded published inputs: tolerance covers the rounding of beta0 and sigma2_u
    assert l2 == pytest.approx(6.95, abs=0.15)
    assert l1 == pytest.approx(77.15, abs=0.15)


def test_components_model3():
    spec = model3()
    mu = marginal_expectation(spec, 2.0860497)
    l3, l2, l1 = variance_components(spec, mu)
    assert l3 == pytest.approx(0.41591198, rel=1e-6)
    assert l2 == pytest.approx(6.4996057, rel=1e-6)
    assert l1 == pytest.approx(76.873075, rel=1e-6)


def test_components_no_clustering():
    spec = _spec(ModelFamily.POISSON, 1.3, 0.0)
    mu = marginal_expectation(spec, 1.3)
    assert variance_components(spec, mu) == (0.0, 0.0, mu)


def test_marginal_stats_model1():
    s = marginal_stats(model1())
    assert s.vpc2 == pytest.approx(0.47075291, abs=5e-5)
    assert s.vpc1 == pytest.approx(0.52924709, abs=5e-5)


def test_model1_unrounded_inputs_recovered_from_printed_components():
    # Invert the printed level components to recover the unrounded inputs,
    # then check the forward map reproduces the printed VPC.
    mu, l2 = 8.4591173, 7.5241871
    s2 = np.log1p(l2 / mu**2)
    beta0 = np.log(mu) - s2 / 2
    assert round(beta0, 3) == 2.085 and round(s2, 3) == 0.100
    s = marginal_stats(_spec(ModelFamily.POISSON, beta0, s2))
    assert s.vpc2 == pytest.approx(0.47075291, rel=1e-7)
    assert s.comp_l2 == pytest.approx(l2, rel=1e-12)


def test_marginal_stats_model2():
    s = marginal_stats(model2())
    # published values come from the unrounded estimates
    assert s.variance == pytest.approx(84.098316, abs=0.15)
    assert s.vpc2 == pytest.approx(0.08262367, abs=5e-4)


def test_marginal_stats_model3():
    s = marginal_stats(model3())
    assert s.vpc3 == pytest.approx(0.00496383, rel=1e-5)
    assert s.vpc2 == pytest.approx(0.07757149, rel=1e-5)
    assert s.vpc1 == pytest.approx(0.91746469, rel=1e-5)
    assert s.vpc23 == pytest.approx(s.vpc3 + s.vpc2, rel=1e-14)
    assert s.icc3 == s.vpc3 and s.icc23 == s.vpc23


def test_marginal_stats_model5_fsm_rounded_inputs():
    spec = ModelSpec(
        ModelFamily.NB2,
        FixedEffects([2.126, 0.372], ("_cons", "fsm")),
        RandomCoefficient([[0.116, -0.027], [-0.027, 0.035]], ("_cons", "fsm")),
        Alpha(0.775),
    )
    s = marginal_stats(spec, *reference_row(spec, fsm=1.0))
    assert s.mu_m == pytest.approx(12.76, abs=0.01)
    assert s.variance == pytest.approx(168.44, abs=0.05)
    assert s.vpc2 == pytest.approx(0.10, abs=0.005)


def test_incidence_rate_ratio():
    assert incidence_rate_ratio(0.377) == pytest.approx(1.4579, abs=1e-4)
    assert round(incidence_rate_ratio(0.377), 2) == 1.46
    assert round(incidence_rate_ratio(0.372), 2) == 1.45
    assert incidence_rate_ratio(0.0) == 1.0


# -- brute-force integration oracle --------------------------------------------


@pytest.mark.parametrize(
    "spec",
    [
        _spec(ModelFamily.POISSON, 2.085, 0.1),
        _spec(ModelFamily.NB2, 2.088, 0.093, 0.877),
        _spec(ModelFamily.NB1, 1.2, 0.4, 0.6),
        _spec(ModelFamily.POISSON_LOGNORMAL, 0.5, 0.25, 0.3),
        _spec(ModelFamily.NB2, 2.0860497, 0.08692447, 0.8766216,
              levels=LevelStructure.THREE, sigma2_v=0.00582819),
        _spec(ModelFamily.NB1, 1.0, 0.3, 0.5, levels=LevelStructure.THREE, sigma2_v=0.2),
    ],
    ids=["poisson", "nb2", "nb1", "lognormal", "nb2-three", "nb1-three"],
)
def test_closed_form_matches_integration(spec):
    eta = spec.fixed.intercept
    mean, var = _oracle_moments(spec, eta)
    s = marginal_stats(spec)
    assert s.mu_m == pytest.approx(mean, rel=1e-6)
    assert s.variance == pytest.approx(var, rel=1e-6)


def test_random_coefficient_uses_variance_function():
    spec = model5()
    eta, z = reference_row(spec, fsm=1.0)
    s2 = z @ spec.random.omega @ z
    plain = ModelSpec(ModelFamily.NB2, FixedEffects([eta]), RandomIntercept(s2), spec.dispersion)
    a, b = marginal_stats(spec, eta, z), marginal_stats(plain)
    assert a.mu_m == pytest.approx(b.mu_m, rel=1e-14)
    assert a.variance == pytest.approx(b.variance, rel=1e-14)


# -- invariants ----------------------------------------------------------------

family_and_disp = st.sampled_from(list(ModelFamily)).flatmap(
    lambda f: st.tuples(st.just(f), st.just(None) if f is ModelFamily.POISSON else st.floats(0, 3))
)


@settings(max_examples=300, deadline=None)
@given(family_and_disp, st.floats(-3, 4), st.floats(0, 2), st.one_of(st.none(), st.floats(0, 1)))
def test_decomposition_invariants(fd, eta, s2, sv):
    family, disp = fd
    levels = LevelStructure.TWO if sv is None else LevelStructure.THREE
    spec = _spec(family, eta, s2, disp, levels=levels, sigma2_v=sv)
    s = marginal_stats(spec)
    total = s.comp_l3 + s.comp_l2 + s.comp_l1
    assert s.variance == pytest.approx(total, rel=1e-12)
    vpcs = [s.vpc2, s.vpc1] + ([s.vpc3] if s.three_level else [])
    assert sum(vpcs) == pytest.approx(1.0, abs=1e-12)
    assert all(0.0 <= p <= 1.0 for p in vpcs)
    if not s.three_level:
        assert s.icc_same_covariates == s.vpc2
        assert s.vpc3 is None and s.comp_l3 == 0.0
    else:
        assert s.icc_same_covariates == s.vpc23


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 200), st.floats(0, 2), st.floats(0, 3))
def test_level2_component_family_invariant(mu, s2, d):
    comps = []
    for family in ModelFamily:
        spec = _spec(family, 0.0, s2, None if family is ModelFamily.POISSON else d)
        comps.append(variance_components(spec, mu)[1])
    assert max(comps) - min(comps) <= 1e-12 * max(comps[0], 1e-300)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 4), st.floats(0, 2), st.one_of(st.none(), st.floats(0, 1)))
def test_nb2_zero_alpha_is_poisson(eta, s2, sv):
    levels = LevelStructure.TWO if sv is None else LevelStructure.THREE
    a = marginal_stats(_spec(ModelFamily.NB2, eta, s2, 0.0, levels=levels, sigma2_v=sv))
    b = marginal_stats(_spec(ModelFamily.POISSON, eta, s2, levels=levels, sigma2_v=sv))
    assert a.as_row() == b.as_row()


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 200), st.floats(0, 2), st.floats(0, 3))
def test_lognormal_nb2_equivalence(mu, s2, alpha):
    nb2 = _spec(ModelFamily.NB2, 0.0, s2, alpha)
    ln = _spec(ModelFamily.POISSON_LOGNORMAL, 0.0, s2, np.log1p(alpha))
    a, b = variance_components(nb2, mu), variance_components(ln, mu)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


def _vpc2_at(mu, s2, alpha):
    spec = _spec(ModelFamily.NB2, 0.0, s2, alpha)
    _, l2, l1 = variance_components(spec, mu)
    return l2 / (l2 + l1)


def test_vpc_monotone_grid():
    mus = np.geomspace(0.1, 100, 20)
    alphas = np.linspace(0.0, 3.0, 20)
    s2 = 0.1
    grid = np.array([[_vpc2_at(m, s2, a) for a in alphas] for m in mus])
    assert np.all(np.diff(grid, axis=0) > 0), "vpc2 must increase with the marginal mean"
    assert np.all(np.diff(grid, axis=1) < 0), "vpc2 must decrease with alpha"


# -- profiles ------------------------------------------------------------------


def _covariate_dataset(rows):
    n = len(rows)
    covs = {name: np.array([r.get(name, 0.0) for r in rows]) for name in COVARIATES[1:]}
    return Dataset(y=np.zeros(n, dtype=int), cluster=np.arange(n), covariates=covs)


def test_profile_model4_rows():
    prof = stats_profile(model4(), _covariate_dataset([{}, {"fsm": 1.0}]))
    ref, fsm = prof[0], prof[1]
    assert ref.mu_m == pytest.approx(8.82, abs=0.01)
    assert ref.vpc2 == pytest.approx(0.10, abs=0.005)
    assert fsm.mu_m == pytest.approx(12.86, abs=0.01)
    assert len(prof) == 2 and [p.mu_m for p in prof] == [ref.mu_m, fsm.mu_m]


def test_profile_empty():
    prof = stats_profile(model4(), _covariate_dataset([]))
    assert len(prof) == 0 and prof.summary is None


def test_profile_missing_covariate():
    data = Dataset(y=[1, 2], cluster=[0, 1], covariates={"fsm": np.array([0.0, 1.0])})
    with pytest.raises(Exception, match="quintile2"):
        stats_profile(model4(), data)


def test_profile_offset_and_summary():
    spec = ModelSpec(ModelFamily.NB2, FixedEffects([1.0, 0.5], ("_cons", "x")), RandomIntercept(0.2), Alpha(0.3))
    x = np.linspace(0, 1, 9)
    data = Dataset(y=np.ones(9, dtype=int), cluster=np.arange(9), covariates={"x": x}, offset=np.log(np.full(9, 2.0)))
    prof = stats_profile(spec, data)
    for i in range(9):
        assert prof[i].mu_m == pytest.approx(marginal_expectation(spec, 1.0 + 0.5 * x[i] + np.log(2.0)), rel=1e-14)
    summ = prof.summary["vpc2"]
    vals = np.array([p.vpc2 for p in prof])
    assert summ.mean == pytest.approx(vals.mean(), rel=1e-14)
    assert summ.median == pytest.approx(np.median(vals), rel=1e-14)
    assert summ.min == vals.min() and summ.max == vals.max()


def test_profile_csv_header(tmp_path):
    prof = stats_profile(model4(), _covariate_dataset([{}, {"fsm": 1.0}]))
    text = prof.to_csv()
    lines = text.splitlines()
    assert lines[0] == "expectation,variance,variance3,variance2,variance1,vpc3,vpc2,vpc1"
    cells = lines[1].split(",")
    assert cells[2] == "" and cells[5] == ""
    assert len(lines) == 3


# -- per-student tables from the rounded estimates quoted in the text -----------

_M4_TEXT = ModelSpec(ModelFamily.NB2, FixedEffects([2.126, 0.377], ("_cons", "fsm")),
                     RandomIntercept(0.103), Alpha(0.782))
_M5_TEXT = ModelSpec(ModelFamily.NB2, FixedEffects([2.126, 0.372], ("_cons", "fsm")),
                     RandomCoefficient([[0.116, -0.027], [-0.027, 0.035]], ("_cons", "fsm")), Alpha(0.775))


@pytest.mark.parametrize("spec, row, want", [
    (_M4_TEXT, {}, (8.82, 84.77, 8.45, 76.32, 0.10)),
    (_M4_TEXT, {"fsm": 1.0}, (12.86, 174.29, 17.96, 156.33, 0.10)),
    (_M5_TEXT, {}, (8.88, 87.24, 9.70, 77.54, 0.11)),
    # the table prints 154.85 for the level-1 component, which contradicts its
    # own total: 168.44 - 16.59 = 151.85
    (_M5_TEXT, {"fsm": 1.0}, (12.76, 168.44, 16.59, 151.85, 0.10)),
], ids=["m4-ref", "m4-fsm", "m5-ref", "m5-fsm"])
def test_per_student_tables_from_text_estimates(spec, row, want):
    s = marginal_stats(spec, *reference_row(spec, **row))
    got = (s.mu_m, s.variance, s.comp_l2, s.comp_l1, s.vpc2)
    np.testing.assert_allclose(got, want, atol=0.01)
