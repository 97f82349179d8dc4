"""Tests of one elasticity estimate against another computed on the same data.

Both estimates are asymptotically linear, so their difference is too.  Its
standard error comes from the per-observation difference of the two
influence values, which accounts for the dependence induced by sharing
the sample.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np
from scipy.stats import norm

from .baseline import FitResult
from .exceptions import DataError, ParameterDomainError
from .report import EstimateReport

Estimate = Union[FitResult, EstimateReport]

TABLE_COLUMNS = ("No Change", "Sig. Different", "Effect Increase", "Effect Decrease", "Sign Change")


@dataclass(frozen=True)
class ComparisonResult:
    estimate_a: float
    estimate_b: float
    difference: float
    se_difference: float
    z_stat: float
    p_value: float
    convention: str
    sign_flip: bool
    level: float = 0.05

    @property
    def significant(self) -> bool:
        return self.p_value < self.level

    def to_json(self) -> dict:
        out = asdict(self)
        for key in ("z_stat",):
            if not math.isfinite(out[key]):
                out[key] = None if math.isnan(out[key]) else math.copysign(1e308, out[key])
        return out

    @classmethod
    def from_json(cls, blob: dict) -> "ComparisonResult":
        try:
            z = blob["z_stat"]
            return cls(
                estimate_a=float(blob["estimate_a"]), estimate_b=float(blob["estimate_b"]),
                difference=float(blob["difference"]), se_difference=float(blob["se_difference"]),
                z_stat=math.nan if z is None else float(z), p_value=float(blob["p_value"]),
                convention=str(blob["convention"]), sign_flip=bool(blob["sign_flip"]),
                level=float(blob.get("level", 0.05)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed comparison result: {exc}") from exc


def _value_and_influence(est: Estimate, name: str = "x") -> tuple[float, np.ndarray]:
    if isinstance(est, FitResult):
        j = est.names.index(name)
        return float(est.coefficients[j]), np.asarray(est.influence[:, j], dtype=float)
    if isinstance(est, EstimateReport):
        return est.theta, np.asarray(est.scores, dtype=float)
    raise TypeError(f"cannot compare objects of type {type(est).__name__}")


def _test(a: float, psi_a: np.ndarray, b: float, psi_b: np.ndarray, level: float,
          convention: str) -> ComparisonResult:
    if not 0 < level < 1:
        raise ParameterDomainError(f"level must lie in (0, 1), got {level}")
    if psi_a.shape != psi_b.shape:
        raise DataError(f"estimates come from samples of different size ({psi_a.shape[0]} vs {psi_b.shape[0]})")
    n = psi_a.shape[0]
    if n < 2:
        raise DataError("need per-observation influence values to compare estimates")
    d = psi_a - psi_b
    d = d - d.mean()
    se = math.sqrt(float(np.mean(d * d)) / n)
    diff = a - b
    scale = max(abs(a), abs(b), 1.0)
    # identical estimators up to rounding: no evidence of a difference
    if abs(diff) <= 1e-10 * scale and se <= 1e-8 * scale:
        z, p = 0.0, 1.0
    elif se == 0.0:
        z, p = math.copysign(math.inf, diff), 0.0
    else:
        z = diff / se
        p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    flip = (a * b < 0) and p < level
    return ComparisonResult(a, b, diff, se, z, p, convention, bool(flip), level)


def compare(a: Estimate, b: Estimate, level: float = 0.05) -> ComparisonResult:
    """Test ``a = b`` for two estimates of the same quantity on the same data."""
    va, pa = _value_and_influence(a)
    vb, pb = _value_and_influence(b)
    return _test(va, pa, vb, pb, level, "continuous")


def compare_continuous(fit: FitResult, report: EstimateReport, level: float = 0.05) -> ComparisonResult:
    """Test the log-linear slope against an average elasticity estimate."""
    return compare(fit, report, level)


def compare_discrete(fit: FitResult, report: EstimateReport, level: float = 0.05) -> ComparisonResult:
    """Test the percentage change ``exp(b) - 1`` implied by a log-linear fit
    against a directly estimated percentage change.

    The influence of ``exp(b) - 1`` is ``exp(b)`` times that of ``b``.
    """
    b, psi = _value_and_influence(fit)
    vb, pb = _value_and_influence(report)
    g = math.exp(b)
    return _test(g - 1.0, g * psi, vb, pb, level, "discrete")


def categorize(result: ComparisonResult) -> str:
    """One of ``no_change``, ``increase``, ``decrease`` or ``sign_change``.

    Increase and decrease compare ``|estimate_b|`` with ``|estimate_a|``.
    """
    if not result.significant:
        return "no_change"
    if result.estimate_a * result.estimate_b < 0:
        return "sign_change"
    return "increase" if abs(result.estimate_b) > abs(result.estimate_a) else "decrease"


def summarize_batch(results: Sequence[ComparisonResult]) -> dict[str, int]:
    """Counts per column of the comparison table.

    Significant results count under "Sig. Different" and under exactly one
    of the increase, decrease and sign-change columns.
    """
    if not results:
        raise DataError("cannot summarize an empty batch")
    cats = [categorize(r) for r in results]
    return {
        "No Change": cats.count("no_change"),
        "Sig. Different": len(cats) - cats.count("no_change"),
        "Effect Increase": cats.count("increase"),
        "Effect Decrease": cats.count("decrease"),
        "Sign Change": cats.count("sign_change"),
    }


def batch_to_csv(table: dict[str, int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    w.writerow([table[c] for c in TABLE_COLUMNS])
    return buf.getvalue()


def results_to_csv(results: Sequence[ComparisonResult]) -> str:
    buf = io.StringIO()
    fields = ("estimate_a", "estimate_b", "difference", "se_difference", "z_stat", "p_value",
              "convention", "sign_flip", "level")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in results:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, f) for f in fields)])
    return buf.getvalue()
