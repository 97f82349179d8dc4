"""Estimate reports shared by every scalar estimator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .exceptions import DataError

REPORT_SCHEMA = 1


def normal_ci(theta: float, se: float, level: float = 0.05) -> tuple[float, float]:
    """Two-sided ``1 - level`` normal interval."""
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    half = float(norm.ppf(1 - level / 2)) * se
    return (theta - half, theta + half)


@dataclass(frozen=True, eq=False)
class EstimateReport:
    """A scalar estimate with its per-observation influence values.

    ``scores`` hold the centered contributions ``phi_i - theta``; their
    mean is zero and ``se = sqrt(mean(scores**2) / n)``.
    """

    method: str
    theta: float
    se: float
    ci: tuple[float, float]
    n: int
    scores: np.ndarray
    level: float = 0.05
    diagnostics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    # fitted nuisances, kept in memory for audits; never serialized
    nuisance: object = field(default=None, repr=False)

    @classmethod
    def from_scores(cls, method: str, theta: float, scores, level: float = 0.05,
                    diagnostics: dict | None = None, metadata: dict | None = None) -> "EstimateReport":
        """Build from centered influence values; the SE is their RMS over sqrt(n)."""
        scores = np.asarray(scores, dtype=float)
        n = scores.shape[0]
        se = math.sqrt(float(np.mean(scores * scores)) / n)
        return cls(method=method, theta=float(theta), se=se, ci=normal_ci(theta, se, level), n=n,
                   scores=scores, level=level, diagnostics=dict(diagnostics or {}),
                   metadata=dict(metadata or {}))

    def to_json(self, include_scores: bool = True) -> dict:
        out = {
            "schema": REPORT_SCHEMA,
            "method": self.method,
            "theta": self.theta,
            "se": self.se,
            "ci": list(self.ci),
            "level": self.level,
            "n": self.n,
            "diagnostics": _jsonable(self.diagnostics),
            **_jsonable(self.metadata),
        }
        if include_scores:
            out["scores"] = self.scores.tolist()
        return out

    @classmethod
    def from_json(cls, blob: dict) -> "EstimateReport":
        try:
            known = {"schema", "method", "theta", "se", "ci", "level", "n", "diagnostics", "scores"}
            return cls(
                method=blob["method"],
                theta=float(blob["theta"]),
                se=float(blob["se"]),
                ci=tuple(blob["ci"]),
                n=int(blob["n"]),
                scores=np.asarray(blob.get("scores", []), dtype=float),
                level=float(blob.get("level", 0.05)),
                diagnostics=dict(blob.get("diagnostics", {})),
                metadata={k: v for k, v in blob.items() if k not in known},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed estimate report: {exc}") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
