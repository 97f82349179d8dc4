"""Random-coefficient outcome models: simulation and ground truth.

Individual outcomes follow ``log Y(x) = a + eps * t(x)`` where ``t(x) = log x``
under the elasticity convention and ``t(x) = x`` under the semi-elasticity
convention.  Besides simulators this module computes the population
quantities the estimators target, either in closed form or by Monte Carlo
with reported standard errors.

Monte Carlo draws are generated in fixed-size chunks, each from its own
derived seed, so results do not depend on how work is partitioned.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, NamedTuple, Union

import numpy as np
from scipy.special import logsumexp, ndtri

from ._rng import derive_seed, generator
from .data import Dataset
from .exceptions import NonFiniteMomentError, ParameterDomainError, SingularityError

CHUNK = 1 << 16
CONVENTIONS = ("elasticity", "semi-elasticity")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ParameterDomainError(message)


def _finite(*values) -> bool:
    return all(math.isfinite(float(v)) for v in values)


# ---------------------------------------------------------------------------
# laws of the individual coefficients (a, eps)

@dataclass(frozen=True)
class Degenerate:
    a: float
    eps: float
    kind = "degenerate"

    def __post_init__(self):
        _require(_finite(self.a, self.eps), "degenerate coefficients must be finite")

    @property
    def eps_mean(self) -> float:
        return float(self.eps)

    @property
    def eps_var(self) -> float:
        return 0.0

    def draw(self, rng: np.random.Generator, n: int):
        return np.full(n, float(self.a)), np.full(n, float(self.eps))


@dataclass(frozen=True)
class GaussianIndep:
    """Constant intercept, Gaussian elasticity."""

    a_const: float
    eps_mean: float
    eps_var: float
    kind = "gaussian_indep"

    def __post_init__(self):
        _require(_finite(self.a_const, self.eps_mean, self.eps_var), "parameters must be finite")
        _require(self.eps_var >= 0, f"eps_var must be non-negative, got {self.eps_var}")

    def draw(self, rng, n):
        eps = self.eps_mean + math.sqrt(self.eps_var) * rng.standard_normal(n)
        return np.full(n, float(self.a_const)), eps


@dataclass(frozen=True)
class BivariateGaussian:
    mean: tuple[float, float]
    cov: tuple[tuple[float, float], tuple[float, float]]
    kind = "bivariate_gaussian"

    def __post_init__(self):
        mean = tuple(float(m) for m in self.mean)
        cov = tuple(tuple(float(c) for c in row) for row in self.cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        _require(len(mean) == 2 and len(cov) == 2 and all(len(r) == 2 for r in cov),
                 "bivariate law needs a 2-vector mean and a 2x2 covariance")
        c = np.array(cov)
        _require(np.all(np.isfinite(c)) and _finite(*mean), "parameters must be finite")
        _require(c[0, 1] == c[1, 0], "covariance must be symmetric")
        _require(np.linalg.eigvalsh(c).min() >= -1e-12 * max(1.0, np.abs(c).max()),
                 "covariance must be positive semidefinite")

    @property
    def eps_mean(self) -> float:
        return self.mean[1]

    @property
    def eps_var(self) -> float:
        return self.cov[1][1]

    def draw(self, rng, n):
        vals, vecs = np.linalg.eigh(np.array(self.cov))
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
        ab = np.array(self.mean) + rng.standard_normal((n, 2)) @ root.T
        return ab[:, 0].copy(), ab[:, 1].copy()


@dataclass(frozen=True)
class TwoPoint:
    """Type 1 ``(a1, eps1)`` with probability ``p``, else type 2 ``(a2, eps2)``."""

    a1: float
    eps1: float
    p: float
    a2: float
    eps2: float
    kind = "two_point"

    def __post_init__(self):
        _require(_finite(self.a1, self.eps1, self.a2, self.eps2), "parameters must be finite")
        _require(0.0 <= self.p <= 1.0, f"p must lie in [0, 1], got {self.p}")

    @property
    def eps_mean(self) -> float:
        return self.p * self.eps1 + (1 - self.p) * self.eps2

    @property
    def eps_var(self) -> float:
        return self.p * (1 - self.p) * (self.eps1 - self.eps2) ** 2

    def draw(self, rng, n):
        first = rng.random(n) < self.p
        return np.where(first, self.a1, self.a2).astype(float), np.where(first, self.eps1, self.eps2).astype(float)


CoefLaw = Union[Degenerate, GaussianIndep, BivariateGaussian, TwoPoint]


# ---------------------------------------------------------------------------
# regressor, instrument and noise laws

@dataclass(frozen=True)
class LogUniform:
    lo: float
    hi: float
    kind = "log_uniform"

    def __post_init__(self):
        _require(_finite(self.lo, self.hi), "bounds must be finite")
        _require(0 < self.lo < self.hi, f"need 0 < lo < hi, got lo={self.lo}, hi={self.hi}")

    def draw(self, rng, n):
        return np.exp(rng.uniform(math.log(self.lo), math.log(self.hi), n))

    def ppf(self, u):
        return np.exp(math.log(self.lo) + u * (math.log(self.hi) - math.log(self.lo)))


@dataclass(frozen=True)
class LogNormal:
    """X with ``log X ~ N(log_mean, log_sd**2)``."""

    log_mean: float
    log_sd: float
    kind = "log_normal"

    def __post_init__(self):
        _require(_finite(self.log_mean, self.log_sd), "parameters must be finite")
        _require(self.log_sd > 0, f"log_sd must be positive, got {self.log_sd}")

    def draw(self, rng, n):
        return np.exp(self.log_mean + self.log_sd * rng.standard_normal(n))

    def ppf(self, u):
        return np.exp(self.log_mean + self.log_sd * ndtri(u))


@dataclass(frozen=True)
class Bernoulli:
    p: float
    kind = "bernoulli"

    def __post_init__(self):
        _require(0.0 < self.p < 1.0, f"Bernoulli p must lie in (0, 1), got {self.p}")

    def draw(self, rng, n):
        return (rng.random(n) < self.p).astype(float)

    def ppf(self, u):
        return (u > 1.0 - self.p).astype(float)


@dataclass(frozen=True)
class Fixed:
    x: float
    kind = "fixed"

    def __post_init__(self):
        _require(_finite(self.x), "fixed value must be finite")

    def draw(self, rng, n):
        return np.full(n, float(self.x))

    def ppf(self, u):
        return np.full(np.shape(u), float(self.x))


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    var: float = 1.0
    kind = "normal"

    def __post_init__(self):
        _require(_finite(self.mean, self.var), "parameters must be finite")
        _require(self.var >= 0, f"variance must be non-negative, got {self.var}")

    def draw(self, rng, n):
        return self.mean + math.sqrt(self.var) * rng.standard_normal(n)

    def ppf(self, u):
        return self.mean + math.sqrt(self.var) * ndtri(u)


@dataclass(frozen=True)
class NormalNoise:
    """Mean-zero Gaussian shock added to the log outcome."""

    sd: float
    kind = "normal_noise"

    def __post_init__(self):
        _require(_finite(self.sd) and self.sd >= 0, f"noise sd must be non-negative, got {self.sd}")

    def draw(self, rng, n):
        return self.sd * rng.standard_normal(n)


@dataclass(frozen=True)
class Linear:
    """First-stage map ``g(z) = intercept + slope * z``."""

    slope: float
    intercept: float = 0.0
    kind = "linear"

    def __post_init__(self):
        _require(_finite(self.slope, self.intercept), "parameters must be finite")

    def __call__(self, z):
        return self.intercept + self.slope * np.asarray(z, dtype=float)


@dataclass(frozen=True)
class CoefGivenV:
    """Law of ``(a, eps)`` given the first-stage shock ``V``.

    ``a | V ~ N(a_mean + a_slope V, a_var + a_var_vsq V**2)`` and
    ``eps | V ~ N(eps_mean + eps_slope V, eps_var)``, independent given V.
    """

    a_mean: float = 0.0
    a_slope: float = 0.0
    a_var: float = 0.0
    eps_mean: float = 0.0
    eps_slope: float = 0.0
    eps_var: float = 0.0
    a_var_vsq: float = 0.0
    kind = "coef_given_v"

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self)]
        _require(_finite(*vals), "parameters must be finite")
        for name in ("a_var", "eps_var", "a_var_vsq"):
            _require(getattr(self, name) >= 0, f"{name} must be non-negative")

    def draw(self, rng, v):
        n = v.shape[0]
        a_sd = np.sqrt(self.a_var + self.a_var_vsq * v * v)
        a = self.a_mean + self.a_slope * v + a_sd * rng.standard_normal(n)
        eps = self.eps_mean + self.eps_slope * v + math.sqrt(self.eps_var) * rng.standard_normal(n)
        return a, eps


_LAWS = {cls.kind: cls for cls in (Degenerate, GaussianIndep, BivariateGaussian, TwoPoint, LogUniform,
                                   LogNormal, Bernoulli, Fixed, Normal, NormalNoise, Linear, CoefGivenV)}


def law_to_dict(law) -> dict:
    return {"type": law.kind, **asdict(law)}


def law_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in _LAWS:
        raise ParameterDomainError(f"unknown law type {kind!r}; expected one of {sorted(_LAWS)}")
    cls = _LAWS[kind]
    known = {f.name for f in fields(cls)}
    if set(d) - known:
        raise ParameterDomainError(f"unknown field(s) for {kind}: {sorted(set(d) - known)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ParameterDomainError(f"bad parameters for {kind}: {exc}") from exc


# ---------------------------------------------------------------------------
# population specifications

@dataclass(frozen=True)
class PopulationSpec:
    coef_law: CoefLaw
    regressor_law: Union[LogUniform, LogNormal, Bernoulli, Fixed]
    noise_law: NormalNoise | None = None
    convention: str = "elasticity"

    def __post_init__(self):
        _require(self.convention in CONVENTIONS, f"convention must be one of {CONVENTIONS}")
        _require(isinstance(self.coef_law, (Degenerate, GaussianIndep, BivariateGaussian, TwoPoint)),
                 f"unsupported coefficient law {self.coef_law!r}")
        _require(isinstance(self.regressor_law, (LogUniform, LogNormal, Bernoulli, Fixed)),
                 f"unsupported regressor law {self.regressor_law!r}")
        _require(self.noise_law is None or isinstance(self.noise_law, NormalNoise),
                 f"unsupported noise law {self.noise_law!r}")
        if self.convention == "elasticity":
            _require(not isinstance(self.regressor_law, Bernoulli),
                     "a Bernoulli regressor has no logarithm; use the semi-elasticity convention")
            _require(not isinstance(self.regressor_law, Fixed) or self.regressor_law.x > 0,
                     "the elasticity convention needs a positive regressor")

    def transform(self, x) -> np.ndarray:
        """Scale on which the regressor enters the log outcome."""
        x = np.asarray(x, dtype=float)
        if self.convention == "semi-elasticity":
            return x
        _require(bool(np.all(x > 0)), "elasticities are defined at positive x only")
        return np.log(x)

    def to_dict(self) -> dict:
        return {
            "kind": "population",
            "coef_law": law_to_dict(self.coef_law),
            "regressor_law": law_to_dict(self.regressor_law),
            "noise_law": None if self.noise_law is None else law_to_dict(self.noise_law),
            "convention": self.convention,
        }


@dataclass(frozen=True)
class TriangularIVSpec:
    """``X = g(Z) + V`` with ``Z`` independent of ``V``; ``(a, eps)`` depend on V.

    The treatment enters the log outcome linearly (semi-elasticity convention).
    """

    z_law: Union[Normal, Bernoulli]
    g: Linear
    v_law: Normal
    coef_given_v: CoefGivenV
    noise_law: NormalNoise | None = None
    convention = "semi-elasticity"

    def __post_init__(self):
        _require(isinstance(self.z_law, (Normal, Bernoulli)), f"unsupported instrument law {self.z_law!r}")
        _require(isinstance(self.g, Linear), f"unsupported first-stage map {self.g!r}")
        _require(isinstance(self.v_law, Normal), f"unsupported first-stage shock law {self.v_law!r}")
        _require(isinstance(self.coef_given_v, CoefGivenV), "coef_given_v must be a CoefGivenV")
        _require(self.noise_law is None or isinstance(self.noise_law, NormalNoise),
                 f"unsupported noise law {self.noise_law!r}")

    def to_dict(self) -> dict:
        return {
            "kind": "triangular_iv",
            "z_law": law_to_dict(self.z_law),
            "g": law_to_dict(self.g),
            "v_law": law_to_dict(self.v_law),
            "coef_given_v": law_to_dict(self.coef_given_v),
            "noise_law": None if self.noise_law is None else law_to_dict(self.noise_law),
        }


Spec = Union[PopulationSpec, TriangularIVSpec]


def spec_from_dict(d: dict) -> Spec:
    d = dict(d)
    kind = d.pop("kind", "population")
    noise = d.pop("noise_law", None)
    noise = None if noise is None else law_from_dict(noise)
    try:
        if kind == "population":
            convention = d.pop("convention", "elasticity")
            spec = PopulationSpec(law_from_dict(d.pop("coef_law")), law_from_dict(d.pop("regressor_law")),
                                  noise, convention)
        elif kind == "triangular_iv":
            spec = TriangularIVSpec(law_from_dict(d.pop("z_law")), law_from_dict(d.pop("g")),
                                    law_from_dict(d.pop("v_law")), law_from_dict(d.pop("coef_given_v")), noise)
        else:
            raise ParameterDomainError(f"unknown spec kind {kind!r}")
    except KeyError as exc:
        raise ParameterDomainError(f"spec is missing field {exc}") from exc
    if d:
        raise ParameterDomainError(f"unknown spec field(s): {sorted(d)}")
    return spec


# ---------------------------------------------------------------------------
# simulation

class Latent(NamedTuple):
    """Simulated draws including the unobserved coefficients."""

    data: Dataset
    a: np.ndarray
    eps: np.ndarray
    noise: np.ndarray


def _outcome(log_y: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        y = np.exp(log_y)
    if not np.all(np.isfinite(y)) or np.any(y == 0):
        raise ParameterDomainError("simulated outcomes overflow or underflow double precision")
    return y


def _check_n(n: int) -> int:
    _require(int(n) == n and n >= 1, f"n must be a positive integer, got {n}")
    return int(n)


def draw_cross_section(spec: PopulationSpec, n: int, seed: int) -> Latent:
    n = _check_n(n)
    x = spec.regressor_law.draw(generator(seed, "cross_section", "x"), n)
    a, eps = spec.coef_law.draw(generator(seed, "cross_section", "coef"), n)
    noise = (np.zeros(n) if spec.noise_law is None
             else spec.noise_law.draw(generator(seed, "cross_section", "noise"), n))
    t = spec.transform(x)
    data = Dataset(y=_outcome(a + eps * t + noise), x=t)
    return Latent(data, a, eps, noise)


def simulate_cross_section(spec: PopulationSpec, n: int, seed: int) -> Dataset:
    """``n`` i.i.d. draws of ``(Y, x)`` from ``spec``; ``x`` on the transformed scale."""
    return draw_cross_section(spec, n, seed).data


def draw_triangular_iv(spec: TriangularIVSpec, n: int, seed: int) -> Latent:
    n = _check_n(n)
    z = spec.z_law.draw(generator(seed, "triangular", "z"), n)
    v = spec.v_law.draw(generator(seed, "triangular", "v"), n)
    x = spec.g(z) + v
    a, eps = spec.coef_given_v.draw(generator(seed, "triangular", "coef"), v)
    noise = (np.zeros(n) if spec.noise_law is None
             else spec.noise_law.draw(generator(seed, "triangular", "noise"), n))
    data = Dataset(y=_outcome(a + eps * x + noise), x=x, z_instruments=z[:, None], v_true=v)
    return Latent(data, a, eps, noise)


def simulate_triangular_iv(spec: TriangularIVSpec, n: int, seed: int) -> Dataset:
    return draw_triangular_iv(spec, n, seed).data


# ---------------------------------------------------------------------------
# power means and their elasticities

class MCEstimate(NamedTuple):
    value: float
    se: float
    draws: int


_PHI_TAGS = {"geometric": 0.0, "min": -math.inf, "max": math.inf}


def power_mean(values, phi) -> float:
    """``(mean v**phi) ** (1/phi)``; ``phi`` may be 0 or the tags geometric/min/max."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise ParameterDomainError("power mean of an empty sample")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise ParameterDomainError("power means are defined for finite positive values only")
    if isinstance(phi, str):
        if phi not in _PHI_TAGS:
            raise ParameterDomainError(f"unknown power-mean tag {phi!r}")
        phi = _PHI_TAGS[phi]
    phi = float(phi)
    if math.isnan(phi):
        raise ParameterDomainError("phi is NaN")
    if phi == -math.inf:
        return float(v.min())
    if phi == math.inf:
        return float(v.max())
    logs = np.log(v)
    center = float(logs.mean())
    if phi == 0.0:
        return float(np.exp(center))
    a = phi * (logs - center)
    if np.max(np.abs(a)) < 1.0:
        # near the geometric mean: avoid cancelling log(mean(exp(a))) against 0
        shift = math.log1p(float(np.mean(np.expm1(a)))) / phi
    else:
        shift = (logsumexp(a) - math.log(v.size)) / phi
    return float(np.exp(center + shift))


def _omega_draws(spec: Spec, draws: int, seed: int, tag: str):
    """``(a + noise, eps)`` for ``draws`` population members, chunked by index."""
    parts_a, parts_e = [], []
    for c, start in enumerate(range(0, draws, CHUNK)):
        m = min(CHUNK, draws - start)
        rng = generator(seed, tag, c)
        if isinstance(spec, TriangularIVSpec):
            v = spec.v_law.draw(rng, m)
            a, eps = spec.coef_given_v.draw(rng, v)
        else:
            a, eps = spec.coef_law.draw(rng, m)
        if spec.noise_law is not None:
            a = a + spec.noise_law.draw(rng, m)
        parts_a.append(a)
        parts_e.append(eps)
    return np.concatenate(parts_a), np.concatenate(parts_e)


def _tilted_mean(log_w: np.ndarray, values: np.ndarray, draws: int) -> MCEstimate:
    """Self-normalized mean of ``values`` under weights ``exp(log_w)``."""
    if np.any(log_w > 709.0):
        raise NonFiniteMomentError("exp overflow in the Monte Carlo weights; the moment is not computable")
    top = log_w.max()
    w = np.exp(log_w - top)
    total = w.sum()
    if not (np.isfinite(total) and total > 0):
        raise NonFiniteMomentError("Monte Carlo weights sum to a non-finite or zero value")
    if w.max() / total > 0.5:
        raise NonFiniteMomentError(
            "a single draw carries more than half of the Monte Carlo weight; "
            "the moment is likely infinite or too heavy-tailed to estimate")
    value = float(np.dot(w, values) / total)
    resid = w * (values - value)
    se = float(math.sqrt(np.dot(resid, resid)) / total)
    return MCEstimate(value, se, draws)


def _check_draws(draws: int) -> int:
    _require(int(draws) == draws and draws >= 1, f"draws must be a positive integer, got {draws}")
    return int(draws)


def power_mean_elasticity_mc(spec: Spec, phi: float, x: float, draws: int, seed: int) -> MCEstimate:
    """Monte Carlo ``E[Y(x)**phi eps] / E[Y(x)**phi]`` with a delta-method SE."""
    draws = _check_draws(draws)
    _require(_finite(phi), "phi must be finite")
    t = float(spec.transform(x)) if isinstance(spec, PopulationSpec) else float(x)
    a, eps = _omega_draws(spec, draws, seed, "power_mean_elasticity")
    return _tilted_mean(phi * (a + eps * t), eps, draws)


def gaussian_closed_form_elasticity(eps_mean: float, eps_var: float, phi: float, x: float,
                                    convention: str = "elasticity") -> float:
    """``eps_mean + phi * eps_var * t(x)`` for Gaussian elasticities and constant intercept."""
    _require(eps_var >= 0, f"eps_var must be non-negative, got {eps_var}")
    _require(convention in CONVENTIONS, f"convention must be one of {CONVENTIONS}")
    if convention == "elasticity":
        _require(x > 0, f"x must be positive, got {x}")
        t = math.log(x)
    else:
        t = float(x)
    return eps_mean + phi * eps_var * t


def _eps_mean(spec: Spec) -> float:
    if isinstance(spec, PopulationSpec):
        return spec.coef_law.eps_mean
    c = spec.coef_given_v
    return c.eps_mean + c.eps_slope * spec.v_law.mean


def wedge(spec: Spec, x: float, draws: int, seed: int) -> MCEstimate:
    """Arithmetic-minus-geometric elasticity gap at ``x`` as a tilted mean.

    Uses the centered elasticity ``eps - E[eps]`` so the tilt weights are
    ``e^a x^(eps - E eps)``; its mean under the tilt is the gap itself.
    """
    draws = _check_draws(draws)
    t = float(spec.transform(x)) if isinstance(spec, PopulationSpec) else float(x)
    a, eps = _omega_draws(spec, draws, seed, "wedge")
    centered = eps - _eps_mean(spec)
    return _tilted_mean(a + centered * t, centered, draws)


def _stratified(rng, k: int) -> np.ndarray:
    """One uniform draw in each of ``k`` equal strata, in random order."""
    return (rng.permutation(k) + rng.random(k)) / k


def _regressor_draws(spec: Spec, rng, k: int) -> np.ndarray:
    """Latin-hypercube draws of the treatment on its transformed scale."""
    if isinstance(spec, PopulationSpec):
        if isinstance(spec.regressor_law, Fixed):
            return spec.transform(np.array([spec.regressor_law.x]))
        return spec.transform(spec.regressor_law.ppf(_stratified(rng, k)))
    z = spec.z_law.ppf(_stratified(rng, k))
    return spec.g(z) + spec.v_law.ppf(_stratified(rng, k))


def true_average_arithmetic_elasticity(spec: Spec, draws: int, seed: int,
                                       batches: int = 40, x_points: int = 256) -> MCEstimate:
    """Population average over X of the arithmetic-mean (semi-)elasticity.

    Nested Monte Carlo: each of ``batches`` independent batches draws
    ``x_points`` stratified regressor values and ``draws // batches`` population members,
    and evaluates the arithmetic-mean elasticity at every drawn x on those
    members.  The reported SE is the spread of the batch means, which covers
    both the outer (X) and inner (population) sampling error.  For a
    triangular design X is drawn from its marginal law and the population
    from the unconditional law of the coefficients, giving the structural
    (interventional) average.
    """
    draws = _check_draws(draws)
    _require(batches >= 2, "need at least two batches for a standard error")
    per = max(1, draws // batches)
    means = np.empty(batches)
    for b in range(batches):
        a, eps = _omega_draws(spec, per, seed, ("oracle", b))
        t = _regressor_draws(spec, generator(seed, "oracle_x", b), x_points)
        vals = np.empty(t.shape[0])
        for i, ti in enumerate(t):
            vals[i] = _tilted_mean(a + eps * ti, eps, per).value
        means[b] = vals.mean()
    return MCEstimate(float(means.mean()), float(means.std(ddof=1) / math.sqrt(batches)), per * batches)


# ---------------------------------------------------------------------------
# designs that share a log-linear estimand but differ in the arithmetic one

class TwinDesign(NamedTuple):
    data_a: Dataset
    data_b: Dataset
    theta_a: Callable[[float], float]
    theta_b: Callable[[float], float]
    spec_a: Spec | None = None
    spec_b: Spec | None = None


def prop3_twin_dgps(beta0: float, sigma2: float, n: int, seed: int) -> TwinDesign:
    """Binary-treatment twins with equal observables and different semi-elasticities.

    Model A has a homogeneous semi-elasticity ``beta0`` and an intercept whose
    variance is larger among the treated; model B has ``a ~ N(0, 1)`` and a
    heterogeneous ``eps ~ N(beta0, sigma2)``.  Both give
    ``log Y | X=1 ~ N(beta0, 1 + sigma2)`` and ``log Y | X=0 ~ N(0, 1)``.

    Treatment is ``1{U < 0.25 + 0.5 Z}`` with ``Z ~ Bernoulli(1/2)`` stored as
    an instrument.  The same treatment draws are used for both models.
    """
    _require(_finite(beta0), "beta0 must be finite")
    _require(_finite(sigma2) and sigma2 > 0, f"sigma2 must be positive, got {sigma2}")
    n = _check_n(n)
    rng = generator(seed, "twins", "design")
    z = (rng.random(n) < 0.5).astype(float)
    x = (rng.random(n) < 0.25 + 0.5 * z).astype(float)

    rng_a = generator(seed, "twins", "A")
    a_a = rng_a.standard_normal(n) * np.sqrt(1.0 + sigma2 * x)
    data_a = Dataset(y=_outcome(a_a + beta0 * x), x=x, z_instruments=z[:, None])

    rng_b = generator(seed, "twins", "B")
    a_b = rng_b.standard_normal(n)
    eps_b = beta0 + math.sqrt(sigma2) * rng_b.standard_normal(n)
    data_b = Dataset(y=_outcome(a_b + eps_b * x), x=x, z_instruments=z[:, None])

    return TwinDesign(data_a, data_b, lambda x: float(beta0), lambda x: float(beta0 + sigma2 * x))


def prop3_triangular_twins(beta0: float, sigma2: float, n: int, seed: int) -> TwinDesign:
    """Continuous-treatment analogue of :func:`prop3_twin_dgps`.

    ``X = Z + V`` with ``Z ~ N(1, 1)`` and ``V ~ N(0, 1)``.  In model A the
    semi-elasticity is ``beta0`` for everyone and selection acts through the
    intercept, ``a | V ~ N(0, 1 + sigma2 V**2)``; in model B, ``a ~ N(0, 1)``
    and ``eps ~ N(beta0, sigma2)`` independently of V.  Both have
    ``E[log Y | X, Z] = beta0 X`` so two-stage least squares targets ``beta0``
    in each, while the arithmetic semi-elasticities are ``beta0`` and
    ``beta0 + sigma2 x``.  ``sigma2 < 1`` keeps ``E[Y]`` finite in model A.
    """
    _require(_finite(beta0), "beta0 must be finite")
    _require(0 < sigma2 < 1, f"sigma2 must lie in (0, 1), got {sigma2}")
    common = dict(z_law=Normal(1.0, 1.0), g=Linear(1.0), v_law=Normal(0.0, 1.0))
    spec_a = TriangularIVSpec(coef_given_v=CoefGivenV(a_var=1.0, a_var_vsq=sigma2, eps_mean=beta0), **common)
    spec_b = TriangularIVSpec(coef_given_v=CoefGivenV(a_var=1.0, eps_mean=beta0, eps_var=sigma2), **common)
    return TwinDesign(
        simulate_triangular_iv(spec_a, n, derive_seed(seed, "triangular_twins", "A")),
        simulate_triangular_iv(spec_b, n, derive_seed(seed, "triangular_twins", "B")),
        lambda x: float(beta0),
        lambda x: float(beta0 + sigma2 * x),
        spec_a,
        spec_b,
    )


# ---------------------------------------------------------------------------
# downstream welfare calculation

def mvpf(tau: float, z: float, eps: float) -> float:
    """Marginal value of public funds of a tax change with behavioural response ``eps``.

    ``1 / (1 - tau / (1 - tau) * z * eps)`` for tax rate ``tau`` and Pareto
    parameter ``z`` of the income distribution.
    """
    _require(0.0 <= tau < 1.0, f"tau must lie in [0, 1), got {tau}")
    _require(z > 0, f"Pareto parameter must be positive, got {z}")
    _require(_finite(eps), "eps must be finite")
    denom = 1.0 - tau / (1.0 - tau) * z * eps
    if abs(denom) < 1e-12:
        raise SingularityError("the fiscal externality exhausts the cost; the MVPF is infinite")
    return 1.0 / denom
