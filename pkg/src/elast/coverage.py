"""Monte Carlo replication harness: bias, RMSE and interval coverage per method."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import baseline, dgp, dream, dream_iv
from ._rng import derive_seed
from .data import Dataset
from .exceptions import ElastError, ParameterDomainError
from .learners import LearnerConfig
from .report import normal_ci

MIN_REPLICATIONS = 50
METHODS = ("ols", "ppml", "manning", "2sls", "dream", "dream-iv")


def oracle_theta(spec: dgp.Spec, draws: int, seed: int) -> dgp.MCEstimate:
    """Average arithmetic (semi-)elasticity of ``spec`` over its regressor law."""
    return dgp.true_average_arithmetic_elasticity(spec, draws, derive_seed(seed, "oracle"))


def simulate(spec: dgp.Spec, n: int, seed: int) -> Dataset:
    if isinstance(spec, dgp.TriangularIVSpec):
        return dgp.simulate_triangular_iv(spec, n, seed)
    return dgp.simulate_cross_section(spec, n, seed)


def run_method(method: str, data: Dataset, *, K: int = 5, level: float = 0.05,
               config: LearnerConfig | None = None, n_jobs: int = 1) -> dict:
    """Estimate with one method; returns ``theta, se, ci, scores`` plus method output.

    Regression methods report the slope on x, with its influence values
    as scores.
    """
    config = config or LearnerConfig()
    if method in ("ols", "ppml", "2sls"):
        fit = {"ols": baseline.ols_loglog, "ppml": baseline.ppml, "2sls": baseline.tsls}[method](data)
        theta, se = fit.coef("x"), fit.se_of("x")
        return {"theta": theta, "se": se, "ci": normal_ci(theta, se, level), "level": level,
                "scores": fit.influence[:, fit.names.index("x")], "fit": fit, "report": None}
    if method == "manning":
        rep = baseline.manning_binary(data, level)
    elif method == "dream":
        rep = dream.estimate(data, K=K, config=config, level=level, n_jobs=n_jobs)
    elif method == "dream-iv":
        rep = dream_iv.estimate_iv(data, K=K, config=config, level=level, n_jobs=n_jobs)
    else:
        raise ParameterDomainError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return {"theta": rep.theta, "se": rep.se, "ci": rep.ci, "level": level, "scores": rep.scores,
            "fit": None, "report": rep}


@dataclass(frozen=True)
class ReplicationRow:
    rep: int
    method: str
    theta: float
    se: float
    ci_lo: float
    ci_hi: float
    covered: bool
    status: str


def _one_replication(spec, n, r, seed, methods, K, level, config, theta0) -> tuple[str, list[ReplicationRow]]:
    data = simulate(spec, n, derive_seed(seed, "coverage", "data", r))
    cfg = config.child("coverage", r)
    rows = []
    for method in methods:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out = run_method(method, data, K=K, level=level, config=cfg)
            lo, hi = out["ci"]
            covered = lo <= theta0 <= hi
            rows.append(ReplicationRow(r, method, out["theta"], out["se"], lo, hi, bool(covered), "ok"))
        except ElastError as exc:
            rows.append(ReplicationRow(r, method, math.nan, math.nan, math.nan, math.nan, False,
                                       f"{type(exc).__name__}: {exc}"))
    return data.content_hash(), rows


@dataclass(frozen=True)
class CoverageResult:
    theta0: float
    theta0_se: float
    rows: tuple[ReplicationRow, ...]
    summary: dict
    data_hashes: tuple[str, ...] = ()


def summarize(rows, methods, theta0) -> dict:
    out = {}
    for m in methods:
        mine = [r for r in rows if r.method == m]
        ok = [r for r in mine if r.status == "ok"]
        th = np.array([r.theta for r in ok])
        entry = {"replications": len(mine), "failures": len(mine) - len(ok)}
        if ok:
            entry["mean_theta"] = float(th.mean())
            entry["mean_se"] = float(np.mean([r.se for r in ok]))
            entry["sd_theta"] = float(th.std(ddof=1)) if len(ok) > 1 else 0.0
            err = th - theta0
            entry["bias"] = float(err.mean())
            entry["rmse"] = float(np.sqrt(np.mean(err**2)))
            entry["coverage"] = float(np.mean([r.covered for r in ok]))
        out[m] = entry
    return out


def run_coverage(spec: dgp.Spec, n: int, R: int, methods=("dream", "ols"), *, seed: int = 0, K: int = 5,
                 level: float = 0.05, config: LearnerConfig | None = None, oracle_draws: int = 400_000,
                 n_jobs: int = 1) -> CoverageResult:
    """Replicate ``methods`` on ``R`` fresh samples of size ``n``.

    Replication ``r`` draws its data and learner seeds from ``(seed, r)``
    only, so results do not depend on ``n_jobs``.  A failing replication is
    recorded and the run continues.
    """
    if R < MIN_REPLICATIONS:
        raise ParameterDomainError(f"need at least {MIN_REPLICATIONS} replications, got {R}")
    for m in methods:
        if m not in METHODS:
            raise ParameterDomainError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    config = config or LearnerConfig()
    oracle = oracle_theta(spec, oracle_draws, seed)
    theta0 = oracle.value
    args = [(spec, n, r, seed, tuple(methods), K, level, config, theta0) for r in range(R)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            chunks = list(pool.map(_one_replication, *zip(*args)))
    else:
        chunks = [_one_replication(*a) for a in args]
    rows = tuple(row for _, chunk in chunks for row in chunk)
    hashes = tuple(h for h, _ in chunks)
    return CoverageResult(theta0, oracle.se, rows, summarize(rows, methods, theta0), hashes)
