"""Log-linear and exponential-mean reference estimators.

Every fit carries per-observation influence values ``psi_i`` with
``coef_hat - coef ~ mean(psi)``; robust covariances are the HC1-scaled
``n / (n - p) * sum(psi psi') / n**2``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .exceptions import (ConvergenceError, DataError, DegenerateArmError, SeparationError,
                         SingularDesignError)
from .report import EstimateReport

ESTIMATORS = ("ols_loglog", "ppml", "manning_binary", "tsls")


@dataclass(frozen=True, eq=False)
class FitResult:
    coefficients: np.ndarray
    vcov_robust: np.ndarray
    influence: np.ndarray
    estimator_tag: str
    converged: bool = True
    iterations: int = 0
    names: tuple[str, ...] = ()
    residuals: np.ndarray | None = None
    vcov_classical: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.influence.shape[0]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov_robust))

    def coef(self, name: str = "x") -> float:
        return float(self.coefficients[self.names.index(name)])

    def se_of(self, name: str = "x") -> float:
        j = self.names.index(name)
        return float(math.sqrt(self.vcov_robust[j, j]))

    def to_json(self, include_influence: bool = True) -> dict:
        out = {
            "estimator": self.estimator_tag,
            "names": list(self.names),
            "coef": self.coefficients.tolist(),
            "se": self.se.tolist(),
            "vcov": self.vcov_robust.tolist(),
            "n": self.n,
            "converged": self.converged,
            "iterations": self.iterations,
        }
        if "first_stage_F" in self.extra:
            out["first_stage_F"] = self.extra["first_stage_F"]
            out["weak_instrument"] = self.extra["weak_instrument"]
        if include_influence:
            out["influence"] = self.influence.tolist()
        return out

    @classmethod
    def from_json(cls, blob: dict) -> "FitResult":
        try:
            extra = {k: blob[k] for k in ("first_stage_F", "weak_instrument") if k in blob}
            p = len(blob["coef"])
            return cls(
                coefficients=np.asarray(blob["coef"], dtype=float),
                vcov_robust=np.asarray(blob["vcov"], dtype=float).reshape(p, p),
                influence=np.asarray(blob.get("influence", np.empty((0, p))), dtype=float).reshape(-1, p),
                estimator_tag=blob["estimator"],
                converged=bool(blob.get("converged", True)),
                iterations=int(blob.get("iterations", 0)),
                names=tuple(blob["names"]),
                extra=extra,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed fit result: {exc}") from exc


def _design(data: Dataset) -> tuple[np.ndarray, tuple[str, ...]]:
    k = data.z_controls.shape[1]
    X = np.column_stack([np.ones(data.n), data.x, data.z_controls])
    return X, ("const", "x", *(f"z{j + 1}" for j in range(k)))


def _check_rank(X: np.ndarray, names) -> None:
    n, p = X.shape
    if n <= p:
        raise SingularDesignError(f"need more observations ({n}) than regressors ({p})")
    scale = np.linalg.norm(X, axis=0)
    Xs = X / np.where(scale > 0, scale, 1.0)
    for j in range(p):
        if scale[j] == 0:
            raise SingularDesignError(f"column {names[j]!r} is identically zero", column=names[j])
        s = np.linalg.svd(Xs[:, : j + 1], compute_uv=False)
        if s[-1] <= 1e-10 * s[0]:
            raise SingularDesignError(
                f"column {names[j]!r} is collinear with the preceding regressors", column=names[j])


def _hc1(psi: np.ndarray) -> np.ndarray:
    n, p = psi.shape
    V = psi.T @ psi / n**2 * (n / (n - p))
    return (V + V.T) / 2


def _ols(X, y):
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    # one refinement step tightens the normal equations to rounding level
    resid = y - X @ beta
    beta = beta + np.linalg.lstsq(X, resid, rcond=None)[0]
    return beta, y - X @ beta


def ols_loglog(data: Dataset) -> FitResult:
    """Least squares of log y on ``(1, x, controls)`` with HC1 inference."""
    X, names = _design(data)
    _check_rank(X, names)
    n, p = X.shape
    beta, resid = _ols(X, data.log_y)
    bread = np.linalg.inv(X.T @ X / n)
    psi = (X * resid[:, None]) @ bread
    s2 = float(resid @ resid) / (n - p)
    return FitResult(
        coefficients=beta,
        vcov_robust=_hc1(psi),
        influence=psi,
        estimator_tag="ols_loglog",
        names=names,
        residuals=resid,
        vcov_classical=s2 * bread / n,
    )


def ppml(data: Dataset, max_iter: int = 100, tol: float = 1e-8) -> FitResult:
    """Poisson pseudo-maximum likelihood for ``E[y | w] = exp(w'gamma)``.

    Newton's method with step halving from ``(log mean y, 0, ...)``.  The
    fit is declared converged when the largest mean score component drops
    below ``tol`` (times the outcome mean when that is below one); one further
    Newton step then polishes the solution.
    """
    W, names = _design(data)
    _check_rank(W, names)
    y = data.y
    n, p = W.shape

    def objective(g):
        eta = W @ g
        return float(np.mean(y * eta - np.exp(eta)))

    gamma = np.zeros(p)
    gamma[0] = math.log(y.mean())
    # the score scales with y; tighten the threshold for small-unit outcomes
    thresh = tol * min(1.0, float(y.mean()))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = np.exp(W @ gamma)
        score = W.T @ (y - mu) / n
        if np.max(np.abs(score)) < thresh:
            converged = True
            break
        H = (W * mu[:, None]).T @ W / n
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular Hessian at iteration {it}", gamma, it) from exc
        if np.max(np.abs(step)) > 1e3:
            bad = names[int(np.argmax(np.abs(step)))]
            raise SeparationError(
                f"coefficient on {bad!r} diverges (Newton step {np.max(np.abs(step)):.3g}); "
                "the data are likely separated", gamma, it)
        f0 = objective(gamma)
        t = 1.0
        with np.errstate(over="ignore"):
            while t > 1e-10:
                cand = gamma + t * step
                f1 = objective(cand)
                if np.isfinite(f1) and f1 >= f0 - 1e-14 * abs(f0):
                    break
                t /= 2
        gamma = cand
    if not converged:
        raise ConvergenceError(f"PPML did not converge in {max_iter} iterations", gamma, max_iter)
    mu = np.exp(W @ gamma)
    H = (W * mu[:, None]).T @ W / n
    gamma = gamma + np.linalg.solve(H, W.T @ (y - mu) / n)
    mu = np.exp(W @ gamma)
    resid = y - mu
    bread = np.linalg.inv((W * mu[:, None]).T @ W / n)
    psi = (W * resid[:, None]) @ bread
    return FitResult(
        coefficients=gamma,
        vcov_robust=_hc1(psi),
        influence=psi,
        estimator_tag="ppml",
        converged=True,
        iterations=it,
        names=names,
        residuals=resid,
    )


def _binary_arms(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    x = data.x
    if not np.all((x == 0) | (x == 1)):
        raise DataError("treatment must be binary (0/1) for the binary-treatment estimators")
    treated = x == 1
    if treated.all() or not treated.any():
        raise DegenerateArmError("one treatment arm is empty")
    return treated, ~treated


def manning_binary(data: Dataset, level: float = 0.05) -> EstimateReport:
    """Arithmetic percentage change of a binary treatment.

    Retransforms the log-linear coefficient with arm-specific smearing
    factors, ``exp(b1) * mean(e^u | x=1) / mean(e^u | x=0) - 1``, which
    equals ``ybar1 / ybar0 - 1``.  The SE is the delta method on the two
    arm means.
    """
    if data.z_controls.shape[1]:
        raise DataError("the binary retransformation estimator does not take controls")
    treated, control = _binary_arms(data)
    fit = ols_loglog(data)
    smear = np.exp(fit.residuals)
    ratio = math.exp(fit.coef("x")) * smear[treated].mean() / smear[control].mean()
    theta = ratio - 1.0

    y = data.y
    y1, y0 = y[treated].mean(), y[control].mean()
    p1, p0 = treated.mean(), control.mean()
    infl = np.where(treated, (y - y1) / (p1 * y0), -y1 * (y - y0) / (p0 * y0**2))
    infl = infl - infl.mean()
    return EstimateReport.from_scores(
        "manning_binary", theta, infl, level,
        diagnostics={"n_treated": int(treated.sum()), "n_control": int(control.sum()),
                     "ols_coef": fit.coef("x")},
    )


def binary_mapping_check(data: Dataset) -> float:
    """Gap between the PPML slope and the smearing-adjusted OLS slope on binary data."""
    treated, control = _binary_arms(data)
    fit = ols_loglog(data)
    gamma1 = ppml(data).coef("x")
    smear = np.exp(fit.residuals)
    implied = fit.coef("x") + math.log(smear[treated].mean()) - math.log(smear[control].mean())
    return abs(gamma1 - implied)


def tsls(data: Dataset) -> FitResult:
    """Two-stage least squares of log y on ``(1, x, controls)``.

    Instruments are ``(1, iv..., controls)``.  The first-stage F statistic
    for the excluded instruments is reported; ``F < 1`` sets the
    ``weak_instrument`` flag and emits a warning.
    """
    if not data.has_instruments:
        raise DataError("two-stage least squares needs instrument columns")
    X, names = _design(data)
    m = data.z_instruments.shape[1]
    Z = np.column_stack([np.ones(data.n), data.z_instruments, data.z_controls])
    z_names = ("const", *(f"iv{j + 1}" for j in range(m)), *names[2:])
    _check_rank(X, names)
    _check_rank(Z, z_names)
    n, p = X.shape

    pi, fs_resid = _ols(Z, data.x)
    Xhat = X.copy()
    Xhat[:, 1] = data.x - fs_resid
    _check_rank(Xhat, ("const", "x_hat", *names[2:]))
    beta = np.linalg.solve(Xhat.T @ X, Xhat.T @ data.log_y)
    resid = data.log_y - X @ beta
    bread = np.linalg.inv(Xhat.T @ X / n)
    psi = (Xhat * resid[:, None]) @ bread.T

    restricted = np.column_stack([np.ones(n), data.z_controls])
    _, r_resid = _ols(restricted, data.x)
    rss_u = float(fs_resid @ fs_resid)
    rss_r = float(r_resid @ r_resid)
    df = n - Z.shape[1]
    F = ((rss_r - rss_u) / m) / (rss_u / df) if rss_u > 0 else math.inf
    weak = F < 1
    if weak:
        warnings.warn(f"weak first stage: F = {F:.3g} < 1", RuntimeWarning, stacklevel=2)
    s2 = float(resid @ resid) / (n - p)
    return FitResult(
        coefficients=beta,
        vcov_robust=_hc1(psi),
        influence=psi,
        estimator_tag="tsls",
        names=names,
        residuals=resid,
        vcov_classical=s2 * np.linalg.inv(Xhat.T @ Xhat),
        extra={"first_stage_F": F, "weak_instrument": weak, "first_stage_coef": pi.tolist()},
    )
