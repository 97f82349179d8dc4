"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line (printed in the terminal summary) before
asserting.  The simulation criteria take most of the suite's runtime; learner
settings are pinned here so the replication studies fit their time budgets on
a single core.
"""
import math
import time

import numpy as np
import pytest

from elast import dgp
from elast.baseline import binary_mapping_check, manning_binary, ols_loglog, ppml, tsls
from elast.coverage import run_coverage
from elast.dream import estimate, fit_nuisance, orthogonality_audit
from elast.dream_iv import estimate_iv
from elast.inference import compare_continuous
from elast.learners import LearnerConfig, fit_conditional_score, fit_regression, gradient_wrt_x

from conftest import ACCEPTANCE, gaussian_wedge_spec, random_binary

# medium networks: accurate enough for the oracles, fast enough for 200 replications
STUDY = LearnerConfig(hidden=(32, 32), lr=0.02)
# the 100-replication size study at n = 5000 runs with two folds and smaller networks
SIZE_STUDY = LearnerConfig(hidden=(16, 16), lr=0.02)
THETA0 = 0.75  # 0.5 + 0.25 * E[log X] with log X ~ U(0, 2)


def _verdict(k, ok, detail):
    line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def binary_sets():
    return [random_binary(seed, n=200) for seed in range(20)]


def test_criterion_01_manning_equals_ppml(binary_sets):
    t0 = time.perf_counter()
    worst = 0.0
    for d in binary_sets:
        worst = max(worst, abs(manning_binary(d).theta - math.expm1(ppml(d).coef("x"))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5
    assert _verdict(1, ok, f"max |manning - (exp(g1) - 1)| = {worst:.2e} (<= 1e-10), {elapsed:.2f}s (< 5s)")


def test_criterion_02_binary_parameter_mapping(binary_sets):
    worst = max(binary_mapping_check(d) for d in binary_sets)
    assert _verdict(2, worst <= 1e-10, f"max mapping residual = {worst:.2e} (<= 1e-10)")


def test_criterion_03_gaussian_closed_form():
    t0 = time.perf_counter()
    spec = gaussian_wedge_spec()
    worst = 0.0
    for i, phi in enumerate((-1.0, 0.5, 1.0)):
        for j, x in enumerate((0.5, math.e, math.e ** 2)):
            mc = dgp.power_mean_elasticity_mc(spec, phi, x, 10**6, seed=100 + 3 * i + j)
            exact = dgp.gaussian_closed_form_elasticity(0.5, 0.25, phi, x)
            worst = max(worst, abs(mc.value - exact) / mc.se)
    elapsed = time.perf_counter() - t0
    ok = worst <= 4 and elapsed < 30
    assert _verdict(3, ok, f"max |MC - closed form| = {worst:.2f} MC SE (<= 4) on 3x3 grid, {elapsed:.1f}s (< 30s)")


@pytest.mark.filterwarnings("ignore")
def test_criterion_04_no_wedge_size():
    spec = dgp.PopulationSpec(dgp.Degenerate(0.0, 0.5), dgp.LogUniform(1.0, math.e ** 2), dgp.NormalNoise(1.0))
    t0 = time.perf_counter()
    rejections = 0
    reps = 100
    for r in range(reps):
        d = dgp.simulate_cross_section(spec, 5000, seed=4000 + r)
        rep = estimate(d, 2, SIZE_STUDY.child("size", r))
        rejections += compare_continuous(ols_loglog(d), rep).significant
    elapsed = time.perf_counter() - t0
    rate = rejections / reps
    ok = 0.01 <= rate <= 0.11 and elapsed < 1800
    assert _verdict(4, ok, f"rejection rate {rate:.2f} over {reps} reps (in [0.01, 0.11]), {elapsed / 60:.1f} min (< 30)")


def test_criterion_05_dream_recovers_theta0():
    t0 = time.perf_counter()
    d = dgp.simulate_cross_section(gaussian_wedge_spec(), 5000, seed=5005)
    rep = estimate(d, 5, STUDY)
    ols = ols_loglog(d)
    cmp = compare_continuous(ols, rep)
    elapsed = time.perf_counter() - t0
    z_dream = (rep.theta - THETA0) / rep.se
    z_ols = (ols.coef("x") - 0.5) / ols.se_of("x")
    ok = abs(z_dream) <= 3 and abs(z_ols) <= 3 and cmp.significant and elapsed < 180
    assert _verdict(5, ok, f"DREAM {rep.theta:.3f} ({z_dream:+.2f} SE from 0.75), OLS {ols.coef('x'):.3f} "
                           f"({z_ols:+.2f} SE from 0.5), comparison p = {cmp.p_value:.1e}, {elapsed:.0f}s (< 180s)")


@pytest.mark.filterwarnings("ignore")
def test_criterion_06_coverage():
    t0 = time.perf_counter()
    res = run_coverage(gaussian_wedge_spec(), 2000, 200, ("dream", "ols"), seed=6006, K=5, config=STUDY)
    elapsed = time.perf_counter() - t0
    dream, ols = res.summary["dream"], res.summary["ols"]
    oracle_ok = abs(res.theta0 - THETA0) <= 4 * res.theta0_se
    ok = (0.88 <= dream["coverage"] <= 0.99 and ols["coverage"] < 0.5 and dream["failures"] == 0
          and oracle_ok and elapsed < 3600)
    assert _verdict(6, ok, f"DREAM coverage {dream['coverage']:.3f} (in [0.88, 0.99]; rmse {dream['rmse']:.4f}, "
                           f"mean SE {dream['mean_se']:.4f}), OLS coverage {ols['coverage']:.3f} (< 0.5), "
                           f"oracle {res.theta0:.4f}, {elapsed / 60:.1f} min (< 60)")


ENDOGENOUS = dgp.TriangularIVSpec(
    z_law=dgp.Normal(0.0, 1.0), g=dgp.Linear(1.0), v_law=dgp.Normal(0.0, 0.25),
    coef_given_v=dgp.CoefGivenV(a_slope=0.5, a_var=0.25, eps_mean=0.4, eps_slope=0.3, eps_var=0.1))


def test_criterion_07_iv_dream_under_endogeneity():
    t0 = time.perf_counter()
    oracle = dgp.true_average_arithmetic_elasticity(ENDOGENOUS, 400_000, seed=7)
    d = dgp.simulate_triangular_iv(ENDOGENOUS, 5000, seed=7007)
    rep = estimate_iv(d, 5, STUDY)
    ols = ols_loglog(d)
    elapsed = time.perf_counter() - t0
    e_eps = 0.4
    diag = rep.diagnostics
    z_cf = (diag["cf_beta"] - e_eps) / diag["cf_beta_se"]
    z_theta = (rep.theta - oracle.value) / math.hypot(rep.se, oracle.se)
    z_ols = (ols.coef("x") - e_eps) / ols.se_of("x")
    ok = abs(z_cf) <= 3 and abs(z_theta) <= 3 and abs(z_ols) > 3 and elapsed < 300
    assert _verdict(7, ok, f"CF beta {diag['cf_beta']:.3f} ({z_cf:+.2f} SE from 0.4), theta {rep.theta:.3f} "
                           f"({z_theta:+.2f} SE from oracle {oracle.value:.4f}), OLS {ols.coef('x'):.3f} "
                           f"({z_ols:+.1f} SE from 0.4, must exceed 3), {elapsed:.0f}s (< 300s)")


@pytest.mark.filterwarnings("ignore")
def test_criterion_08_prop3_discrimination():
    beta0, sigma2 = 0.2, 0.4
    tw = dgp.prop3_twin_dgps(beta0, sigma2, 20_000, seed=8)
    iv_a, iv_b = tsls(tw.data_a), tsls(tw.data_b)
    z_a = (iv_a.coef("x") - beta0) / iv_a.se_of("x")
    z_b = (iv_b.coef("x") - beta0) / iv_b.se_of("x")
    gap = tw.theta_b(1.0) - tw.theta_a(1.0)

    tri = dgp.prop3_triangular_twins(beta0, sigma2, 5000, seed=8)
    est_a = estimate_iv(tri.data_a, 5, STUDY)
    est_b = estimate_iv(tri.data_b, 5, STUDY)
    ok = abs(z_a) <= 3 and abs(z_b) <= 3 and abs(gap - sigma2) <= 1e-12 and est_b.theta > est_a.theta
    assert _verdict(8, ok, f"2SLS A {iv_a.coef('x'):.3f} ({z_a:+.2f} SE), B {iv_b.coef('x'):.3f} ({z_b:+.2f} SE) "
                           f"from {beta0}; theta_B(1) - theta_A(1) = {gap:.12f}; IV-DREAM A {est_a.theta:.3f} "
                           f"< B {est_b.theta:.3f}")


def test_criterion_09_orthogonality_audit():
    d = dgp.simulate_cross_section(gaussian_wedge_spec(), 10_000, seed=9009)
    aud = orthogonality_audit(d, fit_nuisance(d, 5, STUDY), "m")
    ratio = abs(aud.plugin_slope) / max(abs(aud.slope), 1e-300)
    assert _verdict(9, ratio >= 5, f"plug-in slope {aud.plugin_slope:+.4f} vs orthogonal {aud.slope:+.4f} "
                                   f"(+/- {aud.slope_se:.4f}): ratio {ratio:.1f} (>= 5)")


def _fd_worst(model, X):
    scale = model.x_scale
    h = 1e-4 * scale
    grad = gradient_wrt_x(model, X, coords=tuple(range(X.shape[1])))
    worst = 0.0
    for j in range(X.shape[1]):
        up, dn = X.copy(), X.copy()
        up[:, j] += h[j]
        dn[:, j] -= h[j]
        fd = (model.predict(up) - model.predict(dn)) / (2 * h[j])
        err = np.abs(fd - grad[:, j]) / np.maximum(np.abs(fd), 1e-3 * model.y_scale / scale[j])
        worst = max(worst, float(err.max()))
    return worst


def test_criterion_10_learner_oracles():
    rng = np.random.default_rng(10)
    n = 10_000
    z = rng.normal(size=n)
    x = z + rng.normal(size=n)
    score = fit_conditional_score(x, z[:, None], STUDY)
    gx, gz = np.meshgrid(np.linspace(-1.5, 1.5, 13), np.linspace(-1.5, 1.5, 13))
    gx, gz = gx.ravel() + gz.ravel(), gz.ravel()
    rmse = float(np.sqrt(np.mean((score.predict(gx, gz[:, None]) - (gz - gx)) ** 2)))

    worst = 0.0
    for k, target in enumerate((lambda F: np.sin(F[:, 0]) * F[:, 1], lambda F: np.exp(0.3 * F[:, 0]))):
        F = rng.normal(size=(2000, 2)) * [1.0, 3.0] + [0.0, 5.0]
        model = fit_regression(F, target(F) + 0.1 * rng.normal(size=2000), STUDY.child("fd", k))
        worst = max(worst, _fd_worst(model, F[rng.choice(2000, 10, replace=False)]))
    ok = rmse < 0.1 and worst <= 1e-4
    assert _verdict(10, ok, f"conditional score RMSE {rmse:.4f} (< 0.1); gradient vs finite differences "
                            f"max rel err {worst:.1e} (<= 1e-4)")
