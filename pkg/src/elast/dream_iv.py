"""Control-function version of the debiased estimator for an endogenous treatment.

The first stage is ``X = g(Z) + V`` with ``Z`` independent of ``V``.  Given
the control ``V``, the outcome equation ``log Y = c + b X + r V + u`` with
``m(x, v) = E[e^u | X=x, V=v]`` identifies the average structural function

    mu(x) = E_V[exp(r V) m(x, V)]      (up to the factor exp(c + b x)),

and the target is the average over X of ``b + mu'(X) / mu(X)``.  The
per-observation score adds two corrections to this plug-in:

* for ``m``: ``-omega(X, V) S_X(X) / mu(X) * exp(r V) (e^u - m(X, V))``,
  where ``omega = f_X f_V / f_{X,V}`` and ``S_X`` is the marginal score of X;
* for ``g``: ``-lambda(Z) (X - g(Z))``, with ``lambda(z)`` the conditional
  mean given Z of the derivative of the summed score with respect to an
  observation's own control ``V``.  That derivative is taken numerically
  and ``lambda`` is learned by regression on Z.

Every nuisance of an observation is fitted on the other folds.  The ASF
averages over the control residuals of all observations.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from ._rng import derive_seed, generator
from .baseline import FitResult, _check_rank, _hc1
from .data import Dataset
from .dream import CLAMP_WARN_RATE, M_FLOOR, _map_folds, config_hash, make_plan
from .exceptions import DataError, DivergenceError, NumericalError, ParameterDomainError
from .learners import (LearnerConfig, RatioModel, RegressorModel, ScoreModel, fit_density_ratio,
                       fit_marginal_score, fit_regression)
from .report import EstimateReport

WEAK_F = 10.0


# ---------------------------------------------------------------------------
# first stage and control-function regression

class FirstStage(NamedTuple):
    model: RegressorModel
    v_hat: np.ndarray
    r2: float
    weak: bool


def _weak_first_stage(r2: float, n: int, m: int) -> bool:
    if r2 >= 1.0:
        return False
    F = (r2 / m) / max(1e-300, (1.0 - r2) / max(1, n - m - 1))
    return F < WEAK_F


def first_stage(data: Dataset, config: LearnerConfig | None = None) -> FirstStage:
    """Flexible regression of the treatment on the instruments, with residuals.

    A first stage whose R-squared corresponds to an F statistic below 10
    is flagged as weak and triggers a warning.
    """
    if not data.has_instruments:
        raise DataError("the control-function estimator needs instrument columns")
    config = config or LearnerConfig()
    model = fit_regression(data.z_instruments, data.x, config.child("first_stage"))
    v_hat = data.x - model.predict(data.z_instruments)
    r2 = _r2(data.x, v_hat)
    weak = _weak_first_stage(r2, data.n, data.z_instruments.shape[1])
    if weak:
        warnings.warn(f"weak first stage (R^2 = {r2:.3g})", RuntimeWarning, stacklevel=2)
    return FirstStage(model, v_hat, r2, weak)


def _r2(x: np.ndarray, resid: np.ndarray) -> float:
    var = float(np.var(x))
    return 1.0 - float(np.var(resid)) / var if var > 0 else 0.0


def control_function(data: Dataset, v_hat, g_hat) -> FitResult:
    """OLS of log y on ``(1, x, v_hat)`` with a generated-regressor correction.

    ``g_hat`` are the fitted first-stage values.  Estimating the first stage
    moves the control by ``-delta(Z)``; to first order this shifts the
    normal equations by ``r * E[W | Z] delta(Z)`` with ``E[W | Z] =
    (1, g(Z), 0)``, and a regression estimate of ``g`` contributes
    ``V_i`` times that weight to the influence function.
    """
    v_hat = np.asarray(v_hat, dtype=float)
    g_hat = np.asarray(g_hat, dtype=float)
    W = np.column_stack([np.ones(data.n), data.x, v_hat])
    names = ("const", "x", "v_hat")
    _check_rank(W, names)
    n = data.n
    coef, *_ = np.linalg.lstsq(W, data.log_y, rcond=None)
    resid = data.log_y - W @ coef
    bread = np.linalg.inv(W.T @ W / n)
    EW = np.column_stack([np.ones(n), g_hat, np.zeros(n)])
    psi = (W * resid[:, None] + coef[2] * EW * v_hat[:, None]) @ bread
    return FitResult(coefficients=coef, vcov_robust=_hc1(psi), influence=psi,
                     estimator_tag="control_function", names=names, residuals=resid)


# ---------------------------------------------------------------------------
# average structural function

@dataclass(frozen=True, eq=False)
class FlooredMean:
    """Conditional-mean model floored at ``M_FLOOR``, flat where the floor binds."""

    model: RegressorModel

    @property
    def diagnostics(self) -> dict:
        return self.model.diagnostics

    def predict(self, X) -> np.ndarray:
        return np.maximum(self.model.predict(X), M_FLOOR)

    def value_and_grad(self, X) -> tuple[np.ndarray, np.ndarray]:
        val, grad = self.model.value_and_grad(X)
        clamped = val < M_FLOOR
        return np.where(clamped, M_FLOOR, val), np.where(clamped[:, None], 0.0, grad)

    def clamped(self, X) -> np.ndarray:
        return self.model.predict(X) < M_FLOOR


def _k_and_kx(m_hat, x: np.ndarray, v: np.ndarray, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """``exp(rho v) m(x, v)`` and its x-derivative at paired points."""
    val, grad = m_hat.value_and_grad(np.column_stack([x, v]))
    w = np.exp(rho * v)
    return w * val, w * grad[:, 0]


def asf(m_hat, x, v_sample, rho: float = 0.0) -> tuple:
    """Average of ``exp(rho v) m(x, v)`` and its x-derivative over ``v_sample``.

    With ``rho = 0`` this is the plain marginal integration of ``m`` over
    the control; a non-zero ``rho`` restores the control's linear part of
    the outcome equation.  Scalar ``x`` gives scalars, arrays give arrays.
    """
    v = np.asarray(v_sample, dtype=float).reshape(-1)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    mu = np.empty(xs.shape[0])
    mu_p = np.empty(xs.shape[0])
    per = max(1, (1 << 16) // max(1, v.shape[0]))
    for start in range(0, xs.shape[0], per):
        block = xs[start:start + per]
        k, kx = _k_and_kx(m_hat, np.repeat(block, v.shape[0]), np.tile(v, block.shape[0]), rho)
        mu[start:start + per] = k.reshape(block.shape[0], -1).mean(axis=1)
        mu_p[start:start + per] = kx.reshape(block.shape[0], -1).mean(axis=1)
    if np.ndim(x) == 0:
        return float(mu[0]), float(mu_p[0])
    return mu, mu_p


# ---------------------------------------------------------------------------
# first-stage correction

def riesz_lambda(z, contribution_fn: Callable[[float], np.ndarray], config: LearnerConfig | None = None,
                 h: float = 1e-3) -> tuple[RegressorModel, np.ndarray]:
    """Learn ``lambda(z) = E[Lambda | Z = z]`` from numeric score derivatives.

    ``contribution_fn(s)`` returns, per row, the part of the summed score
    that moves when that row's control is shifted by ``s`` (and only that
    row's).  ``Lambda`` is its central difference at ``s = 0`` with step
    ``h``; the fitted regression of ``Lambda`` on ``z`` is returned with
    ``Lambda`` itself.
    """
    config = config or LearnerConfig()
    if not h > 0:
        raise ParameterDomainError(f"step must be positive, got {h}")
    up, down = contribution_fn(h), contribution_fn(-h)
    lam = (up - down) / (2 * h)
    if not np.all(np.isfinite(lam)):
        raise NumericalError("non-finite first-stage perturbation derivative")
    return fit_regression(z, lam, config), lam


def control_shift_contribution(coef, m_model, ratio_model, sx_model, mu_fn, x, y, v, avg_rows, h: float,
                               v_range, v_grid: int = 128) -> Callable[[float], np.ndarray]:
    """Per-row score contribution as a function of a shift of that row's control.

    A row's control enters the summed score in two places.  Its own
    residual term ``-omega S_X / mu * (y e^{-c-bx} - e^{rv} m(x, v))``
    moves with ``v``; only the part through ``e^{rv} m`` is kept, because
    the derivative of ``omega`` multiplies a residual with conditional
    mean zero given ``(X, V, Z)`` and so adds noise but nothing to
    ``E[Lambda | Z]``.  Through the ASF the control also moves every other
    row's plug-in and residual terms; to first order that effect is

        G(v) = mean_i [ k_x(X_i, v) / mu_i + (w_i R_i - mu'_i) k(X_i, v) / mu_i^2 ],

    with ``k = e^{rv} m``, ``w R`` the residual weight and residual of row i,
    and the mean taken over ``avg_rows``.  ``G`` depends on the row only
    through ``v`` and is tabulated on ``v_grid`` nodes spanning ``v_range``.
    ``mu_fn(x)`` and ``mu_fn(x, 1)`` return the ASF and its derivative.
    """
    c, b, r = coef
    y_adj = y * np.exp(-c - b * x)
    mu = mu_fn(x)
    XQ, muQ, mupQ = x[avg_rows], mu[avg_rows], mu_fn(x[avg_rows], 1)
    mQ = m_model.predict(np.column_stack([XQ, v[avg_rows]]))
    RQ = y_adj[avg_rows] - np.exp(r * v[avg_rows]) * mQ
    wQ = ratio_model.ratio(v[avg_rows], XQ) * sx_model.predict(XQ)
    coef_k = (wQ * RQ - mupQ) / muQ**2
    lo, hi = float(np.min(v_range)), float(np.max(v_range))
    nodes = np.linspace(lo - 4 * h, hi + 4 * h, v_grid)
    G = np.empty(nodes.size)
    for i, vn in enumerate(nodes):
        kq, kxq = _k_and_kx(m_model, XQ, np.full(XQ.size, vn), r)
        G[i] = np.mean(kxq / muQ + kq * coef_k)
    G_spline = CubicSpline(nodes, G)
    weight = sx_model.predict(x) * ratio_model.ratio(v, x) / mu

    def contribution(s: float) -> np.ndarray:
        vs = v + s
        own = weight * np.exp(r * vs) * m_model.predict(np.column_stack([x, vs]))
        return own + G_spline(vs)

    return contribution


@dataclass(frozen=True)
class FunctionRatio:
    """Known density ratio ``omega(v, x)``."""

    omega: Callable

    def ratio(self, v, x) -> np.ndarray:
        return np.asarray(self.omega(np.asarray(v, dtype=float), np.asarray(x, dtype=float)), dtype=float)

    def ratio_and_clipped(self, v, x):
        w = self.ratio(v, x)
        return w, np.zeros(w.shape, dtype=bool)


# ---------------------------------------------------------------------------
# cross-fitted nuisances

@dataclass(frozen=True, eq=False)
class IVFoldNuisance:
    fold: int
    g_model: RegressorModel
    coef: np.ndarray  # (c, b, r)
    m_model: FlooredMean
    ratio_model: RatioModel
    sx_model: ScoreModel
    lambda_model: RegressorModel
    mu_spline: CubicHermiteSpline
    train_rows: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def mu(self, x) -> tuple[np.ndarray, np.ndarray]:
        return self.mu_spline(x), self.mu_spline(x, 1)

    def scores(self, y, x, Z) -> dict:
        """Per-observation score pieces for held-out rows."""
        c, b, r = self.coef
        v = x - self.g_model.predict(Z)
        mu, mu_p = self.mu(x)
        if np.any(mu <= 0):
            raise NumericalError("average structural function is not positive")
        xv = np.column_stack([x, v])
        m = self.m_model.predict(xv)
        resid = y * np.exp(-c - b * x) - np.exp(r * v) * m
        omega, clipped = self.ratio_model.ratio_and_clipped(v, x)
        s_x = self.sx_model.predict(x)
        lam = self.lambda_model.predict(Z)
        plugin = b + mu_p / mu
        m_corr = -omega * s_x / mu * resid
        g_corr = -lam * v
        return {"phi": plugin + m_corr + g_corr, "plugin": plugin, "m_corr": m_corr,
                "g_corr": g_corr, "v": v, "lambda": lam, "clipped": clipped,
                "m_clamped": self.m_model.clamped(xv)}


@dataclass(frozen=True, eq=False)
class IVNuisanceSet:
    plan: object
    folds: tuple[IVFoldNuisance, ...]

    def check_hygiene(self) -> None:
        for f in self.folds:
            if np.intersect1d(self.plan.rows(f.fold), f.train_rows).size:
                raise AssertionError(f"fold {f.fold} nuisances were trained on evaluation rows")


@dataclass(frozen=True)
class IVOptions:
    """Numerical settings of the control-function estimator.

    ``asf_grid`` nodes carry exact ASF values and derivatives, interpolated
    in between by cubic Hermite splines.  ``avg_rows`` rows are averaged
    over when propagating a control shift through the ASF, ``v_grid``
    nodes tabulate that propagation, and the perturbation step is
    ``step_rel`` standard deviations of the control.
    """

    asf_grid: int = 256
    avg_rows: int = 500
    v_grid: int = 128
    step_rel: float = 1e-3


def _fit_iv_fold(data: Dataset, plan, k: int, config: LearnerConfig, opts: IVOptions) -> IVFoldNuisance:
    T = plan.train_rows(k)
    Zall, X, y = data.z_instruments, data.x, data.y
    try:
        g_model = fit_regression(Zall[T], X[T], config.child("iv", k, "first_stage"))
        v_all = X - g_model.predict(Zall)
        vT, XT, yT = v_all[T], X[T], y[T]
        W = np.column_stack([np.ones(T.size), XT, vT])
        coef, *_ = np.linalg.lstsq(W, np.log(yT), rcond=None)
        u = np.log(yT) - W @ coef
        m_model = FlooredMean(fit_regression(np.column_stack([XT, vT]), np.exp(u), config.child("iv", k, "mean")))
        ratio_model = fit_density_ratio(vT, XT, config.child("iv", k, "ratio"))
        sx_model = fit_marginal_score(XT, config.child("iv", k, "score"))
    except DivergenceError as exc:
        raise DivergenceError(f"fold {k}: {exc}", epoch=exc.epoch, fold=k) from exc

    lo, hi = float(X.min()), float(X.max())
    pad = 1e-6 * max(1.0, hi - lo)
    grid = np.linspace(lo - pad, hi + pad, opts.asf_grid)
    mu_g, mu_pg = asf(m_model, grid, v_all, coef[2])
    if np.any(mu_g <= 0):
        raise NumericalError(f"fold {k}: average structural function is not positive")
    spline = CubicHermiteSpline(grid, mu_g, mu_pg)

    h = opts.step_rel * float(np.std(vT))
    if not h > 0:
        raise NumericalError(f"fold {k}: control residuals are constant")
    rng = generator(config.seed, "iv", k, "avg_rows")
    Q = np.sort(rng.choice(T.size, size=min(opts.avg_rows, T.size), replace=False))
    contribution = control_shift_contribution(
        coef, m_model, ratio_model, sx_model, spline, XT, yT, vT, Q, h, v_all, opts.v_grid)
    lambda_model, lam = riesz_lambda(Zall[T], contribution, config.child("iv", k, "lambda"), h)
    return IVFoldNuisance(
        fold=k, g_model=g_model, coef=coef, m_model=m_model, ratio_model=ratio_model,
        sx_model=sx_model, lambda_model=lambda_model, mu_spline=spline, train_rows=T,
        diagnostics={"first_stage_epochs": g_model.diagnostics["epochs"],
                     "mean_epochs": m_model.diagnostics["epochs"],
                     "ratio_epochs": ratio_model.diagnostics["epochs"],
                     "score_epochs": sx_model.diagnostics["epochs"],
                     "lambda_epochs": lambda_model.diagnostics["epochs"],
                     "cf_coef": coef.tolist(), "lambda_raw_sd": float(np.std(lam))},
    )


def fit_iv_nuisance(data: Dataset, K: int = 5, config: LearnerConfig | None = None,
                    opts: IVOptions | None = None, n_jobs: int = 1) -> IVNuisanceSet:
    config = config or LearnerConfig()
    opts = opts or IVOptions()
    plan = make_plan(data.n, K, derive_seed(config.seed, "dream_iv", "plan"))
    folds = _map_folds(_fit_iv_fold, [(data, plan, k, config, opts) for k in range(K)], n_jobs)
    ns = IVNuisanceSet(plan=plan, folds=tuple(folds))
    ns.check_hygiene()
    return ns


def _support_bins(g_vals: np.ndarray, v: np.ndarray, bins: int = 5) -> list[list[float]]:
    """Range of the fitted first stage within control quantile bins."""
    edges = np.quantile(v, np.linspace(0, 1, bins + 1))
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    return [[float(g_vals[idx == j].min()), float(g_vals[idx == j].max())] if np.any(idx == j) else [math.nan] * 2
            for j in range(bins)]


def estimate_iv(data: Dataset, K: int = 5, config: LearnerConfig | None = None, level: float = 0.05,
                opts: IVOptions | None = None, n_jobs: int = 1) -> EstimateReport:
    """Cross-fitted control-function estimate of the average structural semi-elasticity."""
    if not data.has_instruments:
        raise DataError("the control-function estimator needs instrument columns")
    if data.z_controls.shape[1]:
        raise DataError("exogenous controls are not supported by the control-function estimator; "
                        "pass them as additional instruments if they belong in the first stage")
    config = config or LearnerConfig()
    opts = opts or IVOptions()
    nuisance = fit_iv_nuisance(data, K, config, opts, n_jobs)

    n = data.n
    parts = {key: np.empty(n) for key in ("phi", "plugin", "m_corr", "g_corr", "v", "lambda")}
    clipped = np.zeros(n, dtype=bool)
    m_clamped = np.zeros(n, dtype=bool)
    g_fit = np.empty(n)
    for f in nuisance.folds:
        rows = nuisance.plan.rows(f.fold)
        out = f.scores(data.y[rows], data.x[rows], data.z_instruments[rows])
        for key in parts:
            parts[key][rows] = out[key]
        clipped[rows] = out["clipped"]
        m_clamped[rows] = out["m_clamped"]
        g_fit[rows] = data.x[rows] - out["v"]
    phi = parts["phi"]
    if not np.all(np.isfinite(phi)):
        raise NumericalError("non-finite score contributions")
    theta = float(phi.mean())

    r2 = _r2(data.x, parts["v"])
    weak = _weak_first_stage(r2, n, data.z_instruments.shape[1])
    cf = control_function(data, parts["v"], g_fit)
    diagnostics = {
        "fold_sizes": nuisance.plan.fold_sizes,
        "first_stage_R2": r2,
        "omega_clip_rate": float(clipped.mean()),
        "m_clamp_rate": float(m_clamped.mean()),
        "lambda_norm": float(np.sqrt(np.mean(parts["lambda"] ** 2))),
        "plugin_theta": float(parts["plugin"].mean()),
        "m_correction_mean": float(parts["m_corr"].mean()),
        "g_correction_mean": float(parts["g_corr"].mean()),
        "cf_beta": cf.coef("x"),
        "cf_beta_se": cf.se_of("x"),
        "cf_rho": cf.coef("v_hat"),
        "support_by_v_bin": _support_bins(g_fit, parts["v"]),
        "learners": [f.diagnostics for f in nuisance.folds],
        "warnings": [],
    }
    if diagnostics["m_clamp_rate"] > CLAMP_WARN_RATE:
        msg = f"conditional mean clamped at {M_FLOOR} for {diagnostics['m_clamp_rate']:.1%} of observations"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        diagnostics["warnings"].append(msg)
    if weak:
        msg = f"weak first stage (out-of-fold R^2 = {r2:.3g})"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        diagnostics["warnings"].append(msg)
    meta = {"seed": config.seed, "K": K,
            "config_hash": config_hash(config, K=K, level=level, iv=opts.__dict__)}
    rep = EstimateReport.from_scores("dream_iv", theta, phi - theta, level, diagnostics, meta)
    return replace(rep, nuisance=nuisance)
