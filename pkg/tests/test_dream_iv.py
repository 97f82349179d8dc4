import math
import warnings

import numpy as np
import pytest

from elast import dgp
from elast.baseline import tsls
from elast.data import Dataset
from elast.dream import M_FLOOR, FunctionMean, estimate
from elast.dream_iv import (FlooredMean, FunctionRatio, IVOptions, asf, control_function, control_shift_contribution,
                            estimate_iv, first_stage, riesz_lambda)
from elast.exceptions import DataError, NumericalError, ParameterDomainError
from elast.learners import LearnerConfig, fit_regression

from conftest import FAST


def _mean(fn, dfn):
    """Known m(x, v) with x-derivative ``dfn``; features are (x, v)."""
    return FunctionMean(lambda F: fn(F[:, 0], F[:, 1]), lambda F: dfn(F[:, 0], F[:, 1]))


EXOGENOUS = dgp.TriangularIVSpec(z_law=dgp.Normal(1.0, 1.0), g=dgp.Linear(1.0), v_law=dgp.Normal(0.0, 0.5),
                                 coef_given_v=dgp.CoefGivenV(a_var=0.5, eps_mean=0.4, eps_var=0.1))


@pytest.fixture(scope="module")
def exogenous_run():
    d = dgp.simulate_triangular_iv(EXOGENOUS, 2000, seed=31)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = estimate_iv(d, 3, FAST)
    return d, rep


# ---------------------------------------------------------------------------
# first stage

def test_exact_first_stage_leaves_no_residual(rng):
    z = rng.normal(size=500)
    d = Dataset(np.exp(rng.normal(size=500)), z, z_instruments=z)
    fs = first_stage(d, LearnerConfig(hidden=(16, 16), lr=0.02))
    assert np.max(np.abs(fs.v_hat)) < 1e-2 * np.std(d.x)
    assert fs.r2 > 0.999 and not fs.weak


def test_first_stage_residual_tracks_the_true_control():
    spec = dgp.TriangularIVSpec(z_law=dgp.Normal(0.0, 1.0), g=dgp.Linear(1.0), v_law=dgp.Normal(0.0, 0.25),
                                coef_given_v=dgp.CoefGivenV(eps_mean=0.3))
    d = dgp.simulate_triangular_iv(spec, 5000, seed=3)
    fs = first_stage(d, FAST)
    assert np.corrcoef(fs.v_hat, d.v_true)[0, 1] > 0.95


def test_irrelevant_instrument_is_flagged(rng):
    n = 1000
    d = Dataset(np.exp(rng.normal(size=n)), rng.normal(size=n), z_instruments=rng.normal(size=n))
    with pytest.warns(RuntimeWarning, match="weak first stage"):
        fs = first_stage(d, FAST)
    assert fs.weak and abs(fs.r2) < 0.05


def test_first_stage_needs_instruments():
    with pytest.raises(DataError):
        first_stage(Dataset([1.0, 2.0], [0.0, 1.0]))


# ---------------------------------------------------------------------------
# control-function regression

def test_linear_control_function_reproduces_tsls():
    spec = dgp.TriangularIVSpec(z_law=dgp.Normal(0.0, 1.0), g=dgp.Linear(1.0), v_law=dgp.Normal(0.0, 1.0),
                                coef_given_v=dgp.CoefGivenV(a_slope=0.8, a_var=0.5, eps_mean=0.4))
    d = dgp.simulate_triangular_iv(spec, 5000, seed=5)
    Z = np.column_stack([np.ones(d.n), d.z_instruments])
    pi, *_ = np.linalg.lstsq(Z, d.x, rcond=None)
    g_hat = Z @ pi
    cf = control_function(d, d.x - g_hat, g_hat)
    iv = tsls(d)
    assert cf.coef("x") == pytest.approx(iv.coef("x"), abs=1e-10)
    # the generated-regressor correction makes the two SEs agree
    assert cf.se_of("x") == pytest.approx(iv.se_of("x"), rel=0.03)
    assert np.max(np.abs(cf.influence.mean(axis=0))) < 1e-8


# ---------------------------------------------------------------------------
# average structural function

def test_floored_mean_keeps_the_asf_positive():
    # a mean that dips below zero for x < 0 and has slope one there
    raw = _mean(lambda x, v: x + 0 * v, lambda x, v: np.ones_like(x))
    m = FlooredMean(raw)
    v = np.linspace(-1, 1, 21)
    mu, mu_p = asf(m, np.array([-2.0, 0.5]), v)
    np.testing.assert_allclose(mu, [M_FLOOR, 0.5])
    np.testing.assert_allclose(mu_p, [0.0, 1.0])
    assert m.clamped(np.array([[-2.0, 0.0], [0.5, 0.0]])).tolist() == [True, False]


def test_asf_of_a_constant(rng):
    v = rng.normal(size=50)
    const = _mean(lambda x, v: np.full(x.shape, 2.5), lambda x, v: np.zeros(x.shape))
    assert asf(const, 0.3, v) == (pytest.approx(2.5, abs=1e-15), 0.0)
    mu, _ = asf(const, 0.3, v, rho=0.4)
    assert mu == pytest.approx(2.5 * np.mean(np.exp(0.4 * v)), rel=1e-14)


def test_asf_of_an_interaction(rng):
    v = rng.normal(size=2000)
    v = np.concatenate([v, -v])
    mu, mu_p = asf(_mean(lambda x, v: x * v, lambda x, v: v), np.array([-1.0, 0.5, 2.0]), v)
    np.testing.assert_allclose(mu, 0.0, atol=1e-12)
    np.testing.assert_allclose(mu_p, 0.0, atol=1e-12)


def test_asf_direct_summation_oracle(rng):
    v = rng.normal(size=777)
    xs = np.linspace(0.5, 3.0, 9)
    mu, mu_p = asf(_mean(lambda x, v: np.exp(v) * x, lambda x, v: np.exp(v)), xs, v)
    np.testing.assert_allclose(mu / xs, np.mean(np.exp(v)), rtol=1e-12)
    np.testing.assert_allclose(mu_p, np.mean(np.exp(v)), rtol=1e-12)


def test_asf_chunking_is_invisible(rng):
    # more (x, v) pairs than one evaluation block
    v = rng.normal(size=3000)
    xs = rng.normal(size=40)
    model = fit_regression(np.column_stack([rng.normal(size=200), rng.normal(size=200)]),
                           rng.normal(size=200), LearnerConfig(hidden=(4,), max_epochs=5))
    mu, mu_p = asf(model, xs, v)
    one = [asf(model, float(x), v) for x in xs[:3]]
    np.testing.assert_allclose(mu[:3], [o[0] for o in one], rtol=1e-13)
    np.testing.assert_allclose(mu_p[:3], [o[1] for o in one], rtol=1e-13)


# ---------------------------------------------------------------------------
# first-stage correction

def _contribution_setup(rng, m_model, rho, n=600):
    x = rng.normal(size=n)
    v = rng.normal(size=n) * 0.7
    y = np.exp(0.3 * x + rho * v + 0.5 * rng.normal(size=n))
    ratio = FunctionRatio(lambda v, x: np.ones_like(v))

    class Score:
        def predict(self, x):
            return -np.asarray(x)

    grid = np.linspace(x.min() - 0.1, x.max() + 0.1, 64)
    mu_g, mu_pg = asf(m_model, grid, v, rho)
    from scipy.interpolate import CubicHermiteSpline
    spline = CubicHermiteSpline(grid, mu_g, mu_pg)
    return x, v, y, ratio, Score(), spline


def test_lambda_vanishes_without_control_dependence(rng):
    m_model = _mean(lambda x, v: 1.0 + 0.2 * np.tanh(x), lambda x, v: 0.2 / np.cosh(x) ** 2)
    x, v, y, ratio, score, spline = _contribution_setup(rng, m_model, rho=0.0)
    h = 1e-3 * np.std(v)
    fn = control_shift_contribution(np.array([0.0, 0.3, 0.0]), m_model, ratio, score, spline, x, y, v,
                                    np.arange(200), h, v)
    z = rng.normal(size=(x.size, 1))
    model, lam = riesz_lambda(z, fn, LearnerConfig(hidden=(8,), max_epochs=50), h)
    assert np.max(np.abs(lam)) < 1e-6
    assert np.mean(np.abs(model.predict(z))) < 0.05


def test_lambda_rejects_bad_steps(rng):
    with pytest.raises(ParameterDomainError):
        riesz_lambda(np.zeros((60, 1)), lambda s: np.zeros(60), h=0.0)
    with pytest.raises(NumericalError):
        riesz_lambda(np.zeros((60, 1)), lambda s: np.full(60, np.nan), h=1e-3)


def test_control_shift_derivative_is_step_stable(exogenous_run):
    d, rep = exogenous_run
    f = rep.nuisance.folds[0]
    T = f.train_rows
    v_all = d.x - f.g_model.predict(d.z_instruments)
    vT = v_all[T]
    base = 1e-3 * np.std(vT)
    lams = []
    for h in (base, 2 * base):
        fn = control_shift_contribution(f.coef, f.m_model, f.ratio_model, f.sx_model, f.mu_spline,
                                        d.x[T], d.y[T], vT, np.arange(0, T.size, 3), h, v_all)
        lams.append((fn(h) - fn(-h)) / (2 * h))
    rel = np.abs(lams[1] - lams[0]) / np.maximum(np.abs(lams[0]), 1e-8)
    assert np.median(rel) < 0.01


# ---------------------------------------------------------------------------
# full estimator

def test_exogenous_design_matches_the_ordinary_estimator(exogenous_run):
    d, rep = exogenous_run
    ordinary = estimate(Dataset(d.y, d.x), 3, FAST)
    joint = math.hypot(rep.se, ordinary.se)
    assert abs(rep.theta - ordinary.theta) <= 3 * joint
    # theta0 = 0.4 + 0.1 E[X] = 0.5
    assert abs(rep.theta - 0.5) <= 3 * rep.se


def test_lambda_is_orthogonal_to_the_control(exogenous_run):
    _, rep = exogenous_run
    lv = np.concatenate([
        f.lambda_model.predict(_.z_instruments[rep.nuisance.plan.rows(f.fold)])
        * (_.x - f.g_model.predict(_.z_instruments))[rep.nuisance.plan.rows(f.fold)]
        for f in rep.nuisance.folds])
    assert abs(lv.mean()) <= 4 * lv.std() / math.sqrt(lv.size)


def test_report_diagnostics_and_hygiene(exogenous_run):
    d, rep = exogenous_run
    diag = rep.diagnostics
    assert rep.method == "dream_iv"
    for key in ("first_stage_R2", "omega_clip_rate", "lambda_norm", "cf_beta", "cf_rho", "support_by_v_bin"):
        assert key in diag
    assert 0.5 < diag["first_stage_R2"] < 0.8  # var Z / var X = 1 / 1.5
    assert 0 <= diag["omega_clip_rate"] <= 1
    assert abs(np.mean(rep.scores)) < 1e-10
    assert diag["fold_sizes"] == [667, 667, 666]
    rep.nuisance.check_hygiene()
    assert len(diag["support_by_v_bin"]) == 5


def test_mean_score_is_affine_in_theta(exogenous_run):
    _, rep = exogenous_run
    raw = rep.scores + rep.theta
    for t in (-1.0, 0.0, 0.7):
        assert np.mean(raw - t) == pytest.approx(rep.theta - t, abs=1e-12)


def test_estimate_iv_rejects_unsupported_inputs(rng):
    n = 100
    with pytest.raises(DataError):
        estimate_iv(Dataset(np.ones(n), rng.normal(size=n)))
    with pytest.raises(DataError):
        estimate_iv(Dataset(np.ones(n), rng.normal(size=n), z_controls=rng.normal(size=n),
                            z_instruments=rng.normal(size=n)))


def test_estimate_iv_is_reproducible(exogenous_run):
    d, rep = exogenous_run
    small = dgp.simulate_triangular_iv(EXOGENOUS, 300, seed=1)
    cfg = LearnerConfig(hidden=(4,), max_epochs=30)
    opts = IVOptions(asf_grid=32, avg_rows=50, v_grid=16)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = estimate_iv(small, 2, cfg, opts=opts)
        b = estimate_iv(small, 2, cfg, opts=opts)
    assert a.theta == b.theta
    np.testing.assert_array_equal(a.scores, b.scores)
