import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from elast import dgp
from elast.exceptions import NonFiniteMomentError, ParameterDomainError, SingularityError

from conftest import gaussian_wedge_spec

TWO_POINT = dgp.TwoPoint(math.log(1000), 0.3, 0.5, math.log(10000), 0.1)


# ---------------------------------------------------------------------------
# simulation

def test_unit_elasticity_at_fixed_x():
    spec = dgp.PopulationSpec(dgp.Degenerate(0.0, 1.0), dgp.Fixed(2.0))
    d = dgp.simulate_cross_section(spec, 3, seed=0)
    np.testing.assert_allclose(d.y, [2.0, 2.0, 2.0], rtol=1e-15)


def test_zero_elasticity_gives_constant_outcome():
    spec = dgp.PopulationSpec(dgp.Degenerate(1.0, 0.0), dgp.LogUniform(1.0, math.e))
    d = dgp.simulate_cross_section(spec, 5, seed=1)
    np.testing.assert_allclose(d.y, math.e, rtol=1e-15)


def test_log_ratio_recovers_mean_elasticity():
    spec = dgp.PopulationSpec(dgp.GaussianIndep(0.0, 0.5, 0.04), dgp.LogUniform(1.0, math.e ** 2))
    d = dgp.simulate_cross_section(spec, 10_000, seed=7)
    assert abs(np.mean(d.log_y / d.x) - 0.5) <= 3 * 0.2 / 100


def test_simulation_is_deterministic_and_seed_sensitive():
    spec = gaussian_wedge_spec()
    a = dgp.simulate_cross_section(spec, 50, seed=3)
    b = dgp.simulate_cross_section(spec, 50, seed=3)
    c = dgp.simulate_cross_section(spec, 50, seed=4)
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != c.content_hash()


def _iv_spec(coef, z=dgp.Normal(0.0, 1.0), v=dgp.Normal(0.0, 0.25)):
    return dgp.TriangularIVSpec(z_law=z, g=dgp.Linear(1.0, 0.0), v_law=v, coef_given_v=coef)


def test_triangular_independent_coefficients_are_uncorrelated_with_v():
    spec = _iv_spec(dgp.CoefGivenV(eps_mean=0.3, eps_var=0.1))
    lat = dgp.draw_triangular_iv(spec, 5000, seed=2)
    assert abs(np.corrcoef(lat.eps, lat.data.v_true)[0, 1]) < 3 / math.sqrt(5000)


def test_triangular_treatment_variance_adds_up():
    n = 20_000
    d = dgp.simulate_triangular_iv(_iv_spec(dgp.CoefGivenV(eps_mean=0.3)), n, seed=5)
    # variance of a sample variance of a normal with variance 1.25
    assert abs(np.var(d.x, ddof=1) - 1.25) < 3 * 1.25 * math.sqrt(2 / (n - 1))
    np.testing.assert_allclose(d.x, d.z_instruments[:, 0] + d.v_true, rtol=0, atol=1e-12)


def test_affine_elasticity_covaries_with_v():
    n = 20_000
    lat = dgp.draw_triangular_iv(_iv_spec(dgp.CoefGivenV(eps_mean=0.3, eps_slope=1.0, eps_var=0.1)), n, seed=6)
    c = np.cov(lat.eps, lat.data.v_true)[0, 1]
    # cov(eps, V) = var(V) = 0.25; the SE of a sample covariance is sqrt(var(eps) var(V) + cov^2)/sqrt(n)
    se = math.sqrt(0.35 * 0.25 + 0.25 ** 2) / math.sqrt(n)
    assert abs(c - 0.25) < 4 * se


def test_spec_serialization_round_trip():
    specs = [
        gaussian_wedge_spec(),
        dgp.PopulationSpec(dgp.TwoPoint(0.0, 1.0, 0.3, 1.0, 2.0), dgp.LogNormal(0.0, 1.0),
                           dgp.NormalNoise(0.5), "elasticity"),
        dgp.PopulationSpec(dgp.BivariateGaussian((0.0, 0.5), ((1.0, 0.1), (0.1, 0.2))), dgp.Bernoulli(0.4),
                           convention="semi-elasticity"),
        _iv_spec(dgp.CoefGivenV(a_slope=0.5, eps_mean=0.3, eps_slope=0.2, eps_var=0.1)),
    ]
    for spec in specs:
        back = dgp.spec_from_dict(spec.to_dict())
        assert back.to_dict() == spec.to_dict()
        d1 = dgp.simulate_cross_section(spec, 20, 1) if isinstance(spec, dgp.PopulationSpec) \
            else dgp.simulate_triangular_iv(spec, 20, 1)
        d2 = dgp.simulate_cross_section(back, 20, 1) if isinstance(back, dgp.PopulationSpec) \
            else dgp.simulate_triangular_iv(back, 20, 1)
        assert d1.content_hash() == d2.content_hash()


@pytest.mark.parametrize("bad", [
    {"kind": "population", "coef_law": {"type": "degenerate", "a": 0, "eps": 1},
     "regressor_law": {"type": "log_uniform", "lo": 0.0, "hi": 1.0}},
    {"kind": "population", "coef_law": {"type": "gaussian_indep", "a_const": 0, "eps_mean": 0, "eps_var": -1},
     "regressor_law": {"type": "fixed", "x": 1.0}},
    {"kind": "population", "coef_law": {"type": "degenerate", "a": 0, "eps": 1},
     "regressor_law": {"type": "bernoulli", "p": 0.5}},
    {"kind": "population", "coef_law": {"type": "degenerate", "a": 0, "eps": 1},
     "regressor_law": {"type": "fixed", "x": 1.0}, "extra": 1},
    {"kind": "galaxy"},
])
def test_invalid_specs_are_rejected(bad):
    with pytest.raises(ParameterDomainError):
        dgp.spec_from_dict(bad)


def test_non_psd_covariance_is_rejected():
    with pytest.raises(ParameterDomainError):
        dgp.BivariateGaussian((0.0, 0.0), ((1.0, 2.0), (2.0, 1.0)))


# ---------------------------------------------------------------------------
# power means

def test_power_mean_examples():
    assert dgp.power_mean([1, 4], 1) == pytest.approx(2.5, rel=1e-15)
    assert dgp.power_mean([1, 4], 0) == pytest.approx(2.0, rel=1e-15)
    assert dgp.power_mean([1, 4], "geometric") == pytest.approx(2.0, rel=1e-15)
    assert dgp.power_mean([1, 4], "min") == 1.0
    assert dgp.power_mean([1, 4], -math.inf) == 1.0
    assert dgp.power_mean([1, 4], "max") == 4.0


positive = st.floats(min_value=1e-3, max_value=1e3)


@given(st.lists(positive, min_size=1, max_size=12), st.floats(-6, 6), st.floats(-6, 6))
def test_power_mean_is_monotone_in_phi(values, p, q):
    lo, hi = sorted((p, q))
    a, b = dgp.power_mean(values, lo), dgp.power_mean(values, hi)
    assert a <= b * (1 + 1e-12)
    assert min(values) * (1 - 1e-12) <= a and b <= max(values) * (1 + 1e-12)


@given(st.lists(positive, min_size=2, max_size=12).filter(lambda v: max(v) > min(v) * 1.01),
       st.floats(-4, 4), st.floats(0.1, 3))
def test_power_mean_strictly_increasing_for_unequal_values(values, p, gap):
    assert dgp.power_mean(values, p) < dgp.power_mean(values, p + gap)


@given(positive, st.integers(1, 8), st.floats(-5, 5))
def test_power_mean_of_equal_values(v, k, p):
    assert dgp.power_mean([v] * k, p) == pytest.approx(v, rel=1e-12)


def test_power_mean_domain_errors():
    for bad in ([], [1.0, 0.0], [1.0, -2.0], [np.nan]):
        with pytest.raises(ParameterDomainError):
            dgp.power_mean(bad, 1.0)
    with pytest.raises(ParameterDomainError):
        dgp.power_mean([1.0], "median")


# ---------------------------------------------------------------------------
# elasticities and wedge

def test_two_point_arithmetic_elasticity():
    spec = dgp.PopulationSpec(TWO_POINT, dgp.Fixed(1.0))
    est = dgp.power_mean_elasticity_mc(spec, 1.0, 1.0, 200_000, seed=1)
    assert abs(est.value - 1300 / 11000) <= 4 * est.se + 1e-12


@pytest.mark.parametrize("x", [1.0, 3.0, 50.0])
def test_two_point_geometric_elasticity_is_the_mean(x):
    spec = dgp.PopulationSpec(TWO_POINT, dgp.Fixed(1.0))
    est = dgp.power_mean_elasticity_mc(spec, 0.0, x, 200_000, seed=2)
    assert abs(est.value - 0.2) <= 4 * est.se + 1e-12


def test_gaussian_mc_matches_closed_form_example():
    spec = dgp.PopulationSpec(dgp.GaussianIndep(0.0, 0.5, 0.04), dgp.Fixed(1.0))
    est = dgp.power_mean_elasticity_mc(spec, 1.0, math.e, 1_000_000, seed=3)
    assert dgp.gaussian_closed_form_elasticity(0.5, 0.04, 1.0, math.e) == pytest.approx(0.54, abs=1e-15)
    assert abs(est.value - 0.54) <= 4 * est.se


@given(st.floats(-2, 2), st.floats(0, 2), st.floats(-3, 3))
def test_closed_form_identities(mean, var, phi):
    assert dgp.gaussian_closed_form_elasticity(mean, var, phi, 1.0) == pytest.approx(mean, abs=1e-15)
    assert dgp.gaussian_closed_form_elasticity(mean, var, 0.0, 7.0) == pytest.approx(mean, abs=1e-15)
    x = 2.5
    semi = dgp.gaussian_closed_form_elasticity(mean, var, phi, x, convention="semi-elasticity")
    assert semi == pytest.approx(mean + phi * var * x, abs=1e-12)


def test_geometric_elasticity_is_flat_in_x():
    spec = dgp.PopulationSpec(dgp.BivariateGaussian((0.0, 0.4), ((0.3, 0.1), (0.1, 0.2))), dgp.Fixed(1.0))
    ests = [dgp.power_mean_elasticity_mc(spec, 0.0, x, 100_000, seed=4) for x in (0.5, 2.0, 8.0)]
    for e in ests:
        assert abs(e.value - 0.4) <= 4 * e.se


def test_degenerate_elasticity_has_no_wedge():
    spec = dgp.PopulationSpec(dgp.Degenerate(0.2, 0.7), dgp.Fixed(1.0), dgp.NormalNoise(0.5))
    for x in (0.5, 1.0, 4.0):
        w = dgp.wedge(spec, x, 50_000, seed=5)
        assert abs(w.value) <= 1e-12


@pytest.mark.parametrize("x", [0.5, 2.0, 5.0])
def test_gaussian_wedge_is_variance_times_log_x(x):
    spec = dgp.PopulationSpec(dgp.GaussianIndep(0.0, 0.5, 0.25), dgp.Fixed(1.0))
    w = dgp.wedge(spec, x, 400_000, seed=6)
    assert abs(w.value - 0.25 * math.log(x)) <= 4 * w.se


def test_wedge_slope_at_one_is_the_variance():
    # constant intercept: d eps_1 / d log x at x=1 equals Var(eps)
    spec = dgp.PopulationSpec(dgp.TwoPoint(0.0, 0.1, 0.4, 0.0, 0.9), dgp.Fixed(1.0))
    var = 0.4 * 0.6 * 0.8 ** 2
    h = 0.05
    up = dgp.power_mean_elasticity_mc(spec, 1.0, math.exp(h), 400_000, seed=7)
    down = dgp.power_mean_elasticity_mc(spec, 1.0, math.exp(-h), 400_000, seed=7)
    slope = (up.value - down.value) / (2 * h)
    # the shared draws make the difference far more precise than either end;
    # bound its error by the MC error of the ends, plus the O(h^2) curvature
    assert slope >= 0
    assert abs(slope - var) <= 4 * math.hypot(up.se, down.se) / (2 * h) + 0.01


def test_heavy_tails_are_reported():
    spec = dgp.PopulationSpec(dgp.GaussianIndep(0.0, 0.0, 400.0), dgp.Fixed(1.0))
    with pytest.raises(NonFiniteMomentError):
        dgp.power_mean_elasticity_mc(spec, 1.0, math.e ** 3, 10_000, seed=8)


# ---------------------------------------------------------------------------
# oracles

def test_degenerate_oracle_is_exact():
    spec = dgp.PopulationSpec(dgp.Degenerate(0.0, 0.8), dgp.LogUniform(1.0, 5.0))
    est = dgp.true_average_arithmetic_elasticity(spec, 20_000, seed=9)
    assert est.value == pytest.approx(0.8, abs=1e-12)


def test_gaussian_wedge_oracle():
    est = dgp.true_average_arithmetic_elasticity(gaussian_wedge_spec(), 400_000, seed=10)
    assert abs(est.value - 0.75) <= 4 * est.se


def test_two_point_oracle_at_fixed_x():
    spec = dgp.PopulationSpec(TWO_POINT, dgp.Fixed(1.0))
    est = dgp.true_average_arithmetic_elasticity(spec, 200_000, seed=11)
    assert abs(est.value - 1300 / 11000) <= 4 * est.se


def test_triangular_oracle_matches_closed_form():
    # eps | V ~ N(e0 + e1 V, s2), a | V ~ N(a1 V, sa2), V ~ N(0, sv2): jointly Gaussian, so
    # the arithmetic semi-elasticity at x is E[eps] + Cov(a + eps x, eps), averaged over X
    e0, e1, s2, a1, sa2, sv2 = 0.4, 0.3, 0.02, 0.5, 0.1, 0.5
    spec = dgp.TriangularIVSpec(dgp.Normal(1.0, 1.0), dgp.Linear(1.0, 0.0), dgp.Normal(0.0, sv2),
                                dgp.CoefGivenV(a_slope=a1, a_var=sa2, eps_mean=e0, eps_slope=e1, eps_var=s2))
    var_eps = e1 ** 2 * sv2 + s2
    cov_a_eps = a1 * e1 * sv2
    truth = e0 + cov_a_eps + var_eps * 1.0  # E[X] = 1
    est = dgp.true_average_arithmetic_elasticity(spec, 400_000, seed=12)
    assert abs(est.value - truth) <= 4 * est.se


# ---------------------------------------------------------------------------
# twin designs and welfare

def test_binary_twins_share_observables():
    tw = dgp.prop3_twin_dgps(0.3, 0.5, 10_000, seed=13)
    assert np.array_equal(tw.data_a.x, tw.data_b.x)
    for arm in (0.0, 1.0):
        la = tw.data_a.log_y[tw.data_a.x == arm]
        lb = tw.data_b.log_y[tw.data_b.x == arm]
        assert stats.ks_2samp(la, lb).pvalue > 0.01
    ma = np.column_stack([tw.data_a.log_y, tw.data_a.x])
    mb = np.column_stack([tw.data_b.log_y, tw.data_b.x])
    np.testing.assert_allclose(ma.mean(axis=0), mb.mean(axis=0), atol=0.06)
    np.testing.assert_allclose(np.cov(ma.T), np.cov(mb.T), atol=0.1)
    assert tw.theta_a(1.0) == 0.3
    assert tw.theta_b(1.0) - tw.theta_a(1.0) == pytest.approx(0.5, abs=1e-15)
    for x in (-1.0, 0.0, 2.0):
        assert tw.theta_a(x) == 0.3
        assert tw.theta_b(x) == pytest.approx(0.3 + 0.5 * x)


def test_triangular_twins_share_the_conditional_log_mean():
    tw = dgp.prop3_triangular_twins(0.2, 0.4, 20_000, seed=14)
    for d in (tw.data_a, tw.data_b):
        assert d.has_instruments
        W = np.column_stack([np.ones(d.n), d.x, d.z_instruments[:, 0]])
        coef, *_ = np.linalg.lstsq(W, d.log_y, rcond=None)
        # E[log Y | X, Z] = 0.2 X in both designs
        np.testing.assert_allclose(coef, [0.0, 0.2, 0.0], atol=0.06)
    assert tw.theta_b(1.0) - tw.theta_a(1.0) == pytest.approx(0.4)


def test_mvpf_examples():
    assert dgp.mvpf(0.0, 3.0, 0.7) == 1.0
    assert dgp.mvpf(0.4, 2.0, 0.0) == 1.0
    assert dgp.mvpf(0.5, 2.0, 0.2) == pytest.approx(1 / 0.6, rel=1e-14)
    with pytest.raises(SingularityError):
        dgp.mvpf(0.5, 2.0, 0.5)
    with pytest.raises(ParameterDomainError):
        dgp.mvpf(1.0, 2.0, 0.1)
