"""Cross-fitted debiased estimator of the average arithmetic (semi-)elasticity.

With ``log Y = b0 + b1 x + g'z + u``, ``m(x, z) = E[e^u | x, z]`` and
``s(x | z)`` the conditional density score of the treatment, the
per-observation score is

    phi = b1 + m'(x, z) / m(x, z) + alpha(x, z) * (e^u - m(x, z)),
    alpha = -s(x | z) / m(x, z),

where ``m'`` is the derivative along x.  The correction term makes the mean
score insensitive to first-order errors in ``m`` and ``s``.  All nuisances of
an observation are fitted on the other folds.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Protocol

import numpy as np

from ._rng import derive_seed, generator
from .baseline import manning_binary
from .data import Dataset
from .exceptions import DataError, DivergenceError, ParameterDomainError
from .learners import LearnerConfig, fit_conditional_score, fit_regression
from .report import EstimateReport

M_FLOOR = 1e-3
CLAMP_WARN_RATE = 0.10
MIN_DISTINCT_X = 10


# ---------------------------------------------------------------------------
# sample splitting

@dataclass(frozen=True, eq=False)
class CrossFitPlan:
    n: int
    K: int
    assignment: np.ndarray
    seed: int

    def rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def train_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    @property
    def fold_sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.K).tolist()


def make_plan(n: int, K: int = 5, seed: int = 0) -> CrossFitPlan:
    """Random balanced partition of ``range(n)`` into ``K`` folds."""
    if K < 2:
        raise ParameterDomainError(f"need at least 2 folds, got K={K}")
    if n < 2 * K:
        raise ParameterDomainError(f"need n >= 2K observations for K={K} folds, got n={n}")
    perm = generator(seed, "crossfit_plan").permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % K
    assignment.setflags(write=False)
    return CrossFitPlan(n=n, K=K, assignment=assignment, seed=seed)


# ---------------------------------------------------------------------------
# nuisances

class MeanModel(Protocol):
    def value_and_grad(self, features) -> tuple[np.ndarray, np.ndarray]: ...


class ScoreFn(Protocol):
    def predict(self, x, z=None) -> np.ndarray: ...


@dataclass(frozen=True)
class FunctionMean:
    """Known conditional mean ``m(features)`` with derivative ``dm`` along x."""

    m: Callable
    dm: Callable

    def value_and_grad(self, features):
        F = np.asarray(features, dtype=float)
        F = F[:, None] if F.ndim == 1 else F
        grad = np.zeros_like(F)
        grad[:, 0] = self.dm(F)
        return np.asarray(self.m(F), dtype=float), grad

    def predict(self, features):
        F = np.asarray(features, dtype=float)
        return np.asarray(self.m(F[:, None] if F.ndim == 1 else F), dtype=float)


@dataclass(frozen=True)
class FunctionScore:
    """Known conditional score ``s(x, z)``."""

    s: Callable

    def predict(self, x, z=None):
        return np.asarray(self.s(np.asarray(x, dtype=float), z), dtype=float)


class ScoreParts(NamedTuple):
    """Per-observation ingredients of the score."""

    beta1: np.ndarray
    x: np.ndarray
    u: np.ndarray
    m: np.ndarray
    m_prime: np.ndarray
    s: np.ndarray
    clamped: np.ndarray

    @property
    def alpha(self) -> np.ndarray:
        return -self.s / self.m

    def phi(self) -> np.ndarray:
        """Score without the ``- theta`` term."""
        return self.beta1 + self.m_prime / self.m + self.alpha * (np.exp(self.u) - self.m)

    def plugin(self) -> np.ndarray:
        return self.beta1 + self.m_prime / self.m


@dataclass(frozen=True, eq=False)
class FoldNuisance:
    """Nuisances for one fold, fitted on ``train_rows`` only."""

    fold: int
    coef: np.ndarray
    mean_model: MeanModel
    score_model: ScoreFn
    train_rows: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def parts(self, y, x, Z) -> ScoreParts:
        x = np.asarray(x, dtype=float).reshape(-1)
        Z = np.asarray(Z, dtype=float).reshape(x.shape[0], -1)
        u = np.log(y) - self.coef[0] - self.coef[1] * x - Z @ self.coef[2:]
        m_raw, grad = self.mean_model.value_and_grad(np.column_stack([x, Z]))
        clamped = m_raw < M_FLOOR
        m = np.where(clamped, M_FLOOR, m_raw)
        # the clamped function is flat where the floor binds
        m_prime = np.where(clamped, 0.0, grad[:, 0])
        s = self.score_model.predict(x, Z if Z.shape[1] else None)
        return ScoreParts(np.full(x.shape[0], self.coef[1]), x, u, m, m_prime, s, clamped)


def score_contribution(obs, nuisance: FoldNuisance, theta: float) -> np.ndarray | float:
    """``phi(W; theta)`` for observation(s) ``obs = (y, x, z)`` under one fold's nuisances."""
    y, x, z = obs
    scalar = np.ndim(y) == 0
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    Z = np.asarray(z if z is not None else np.empty((y.shape[0], 0)), dtype=float).reshape(y.shape[0], -1)
    val = nuisance.parts(y, x, Z).phi() - theta
    return float(val[0]) if scalar else val


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    plan: CrossFitPlan
    folds: tuple[FoldNuisance, ...]

    def check_hygiene(self) -> None:
        """Raise if any fold's nuisances saw one of its own evaluation rows."""
        for f in self.folds:
            own = self.plan.rows(f.fold)
            if np.intersect1d(own, f.train_rows).size:
                raise AssertionError(f"fold {f.fold} nuisances were trained on evaluation rows")

    def parts(self, data: Dataset) -> ScoreParts:
        if data.n != self.plan.n:
            raise DataError(f"nuisances were fitted for n={self.plan.n}, data has n={data.n}")
        out = {name: np.empty(data.n) for name in ScoreParts._fields}
        out["clamped"] = np.zeros(data.n, dtype=bool)
        for f in self.folds:
            rows = self.plan.rows(f.fold)
            p = f.parts(data.y[rows], data.x[rows], data.z_controls[rows])
            for name in ScoreParts._fields:
                out[name][rows] = getattr(p, name)
        return ScoreParts(**out)


def _fit_fold(data: Dataset, plan: CrossFitPlan, k: int, config: LearnerConfig) -> FoldNuisance:
    train = plan.train_rows(k)
    d = data.subset(train)
    W = np.column_stack([np.ones(d.n), d.x, d.z_controls])
    coef, *_ = np.linalg.lstsq(W, d.log_y, rcond=None)
    u = d.log_y - W @ coef
    features = np.column_stack([d.x, d.z_controls])
    try:
        m_model = fit_regression(features, np.exp(u), config.child("dream", k, "mean"))
        s_model = fit_conditional_score(d.x, d.z_controls if d.z_controls.shape[1] else None,
                                        config.child("dream", k, "score"))
    except DivergenceError as exc:
        raise DivergenceError(f"fold {k}: {exc}", epoch=exc.epoch, fold=k) from exc
    return FoldNuisance(
        fold=k, coef=coef, mean_model=m_model, score_model=s_model, train_rows=train,
        diagnostics={"mean_val_mse": m_model.diagnostics["val_mse"],
                     "mean_epochs": m_model.diagnostics["epochs"],
                     "score_val_loss": s_model.diagnostics["val_loss"],
                     "score_epochs": s_model.diagnostics["epochs"]},
    )


def _map_folds(fn, args_list, n_jobs: int):
    if n_jobs == 1 or len(args_list) == 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, *zip(*args_list)))


def fit_nuisance(data: Dataset, K: int = 5, config: LearnerConfig | None = None,
                 n_jobs: int = 1) -> NuisanceSet:
    config = config or LearnerConfig()
    plan = make_plan(data.n, K, derive_seed(config.seed, "dream", "plan"))
    folds = _map_folds(_fit_fold, [(data, plan, k, config) for k in range(K)], n_jobs)
    ns = NuisanceSet(plan=plan, folds=tuple(folds))
    ns.check_hygiene()
    return ns


# ---------------------------------------------------------------------------
# estimation

def config_hash(config: LearnerConfig, **extra) -> str:
    blob = json.dumps({"learner": config.to_dict(), **extra}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _treatment_checks(data: Dataset) -> list[str]:
    notes = []
    distinct = np.unique(data.x).size
    if distinct < MIN_DISTINCT_X:
        msg = (f"treatment has only {distinct} distinct values; the conditional density score is "
               "ill-posed, consider the binary/discrete estimators")
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        notes.append(msg)
    return notes


def estimate_from_nuisance(data: Dataset, nuisance: NuisanceSet, level: float = 0.05,
                           method: str = "dream") -> EstimateReport:
    parts = nuisance.parts(data)
    phi = parts.phi()
    if not np.all(np.isfinite(phi)):
        raise DivergenceError("non-finite score contributions")
    theta = float(np.mean(phi))
    clamp_rate = float(parts.clamped.mean())
    diagnostics = {
        "fold_sizes": nuisance.plan.fold_sizes,
        "clamp_rate": clamp_rate,
        "learners": [f.diagnostics for f in nuisance.folds],
        "plugin_theta": float(np.mean(parts.plugin())),
        "warnings": [],
    }
    if clamp_rate > CLAMP_WARN_RATE:
        msg = f"conditional mean clamped at {M_FLOOR} for {clamp_rate:.1%} of observations"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        diagnostics["warnings"].append(msg)
    return EstimateReport.from_scores(method, theta, phi - theta, level, diagnostics=diagnostics)


def estimate(data: Dataset, K: int = 5, config: LearnerConfig | None = None, level: float = 0.05,
             n_jobs: int = 1) -> EstimateReport:
    """Cross-fitted debiased estimate with normal-approximation inference.

    Binary treatments are handed to :func:`manning_binary`, whose report
    carries a notice saying so.
    """
    config = config or LearnerConfig()
    meta = {"seed": config.seed, "K": K, "config_hash": config_hash(config, K=K, level=level)}
    if np.all((data.x == 0) | (data.x == 1)) and np.unique(data.x).size == 2:
        msg = "binary treatment: reporting the retransformed percentage change instead"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        rep = manning_binary(data, level)
        rep.diagnostics["notice"] = msg
        rep.metadata.update(meta)
        return rep
    notes = _treatment_checks(data)
    nuisance = fit_nuisance(data, K, config, n_jobs)
    rep = estimate_from_nuisance(data, nuisance, level)
    rep.diagnostics["warnings"][:0] = notes
    rep.metadata.update(meta)
    return replace(rep, nuisance=nuisance)


# ---------------------------------------------------------------------------
# orthogonality audit

class AuditResult(NamedTuple):
    direction: str
    t_grid: np.ndarray
    values: np.ndarray
    slope: float
    slope_se: float
    curvature: float
    plugin_values: np.ndarray
    plugin_slope: float
    plugin_slope_se: float


def _perturbed(parts: ScoreParts, direction: str, t: float, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation orthogonal and plug-in scores after moving one nuisance by ``t * h``."""
    beta1, u, m, mp, s = parts.beta1, parts.u, parts.m, parts.m_prime, parts.s
    if direction == "m":
        m = m + t * h
    elif direction == "score":
        s = s + t * h
    elif direction == "beta":
        beta1 = beta1 + t * h
        u = u - t * h * parts.x
    else:
        raise ParameterDomainError(f"unknown perturbation direction {direction!r}; use m, score or beta")
    plugin = beta1 + mp / m
    return plugin - s / m * (np.exp(u) - m), plugin


def _slope_curvature(t: np.ndarray, per_obs: np.ndarray) -> tuple[float, float, float]:
    """Quadratic least-squares fit of the mean over ``t``; slope SE from per-observation fits."""
    V = np.column_stack([np.ones_like(t), t, t * t])
    coefs = np.linalg.lstsq(V, per_obs, rcond=None)[0]  # (3, n)
    slopes = coefs[1]
    n = slopes.shape[0]
    return float(slopes.mean()), float(slopes.std(ddof=1) / math.sqrt(n)), float(2 * coefs[2].mean())


def orthogonality_audit(data: Dataset, nuisance: NuisanceSet, perturbation: str = "m",
                        t_grid=(-0.5, -0.25, 0.0, 0.25, 0.5), h: float = 0.1) -> AuditResult:
    """Mean score along ``nuisance + t * h`` for a constant direction ``h``.

    ``m`` shifts the conditional mean, ``score`` shifts the density score
    and ``beta`` shifts the treatment coefficient (and the residuals with
    it).  Slopes and curvature come from a quadratic fit over ``t_grid``;
    the plug-in score ``b1 + m'/m`` is audited alongside for comparison.
    """
    t = np.asarray(t_grid, dtype=float)
    if t.size < 3:
        raise ParameterDomainError("need at least three grid points for slope and curvature")
    parts = nuisance.parts(data)
    orth = np.empty((t.size, data.n))
    plug = np.empty((t.size, data.n))
    for i, ti in enumerate(t):
        orth[i], plug[i] = _perturbed(parts, perturbation, ti, h)
    slope, slope_se, curv = _slope_curvature(t, orth)
    p_slope, p_se, _ = _slope_curvature(t, plug)
    return AuditResult(perturbation, t, orth.mean(axis=1), slope, slope_se, curv,
                       plug.mean(axis=1), p_slope, p_se)
