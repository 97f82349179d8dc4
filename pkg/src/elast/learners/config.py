from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .._rng import derive_seed
from ..exceptions import ParameterDomainError


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters shared by every nuisance learner.

    ``noise_scales`` are denoising-score-matching perturbation scales as
    fractions of the treatment's standard deviation; the fitted score is read
    off at the smallest one.  ``ema`` is the weight-averaging factor used by
    the objectives that redraw noise or permutations every epoch.
    """

    hidden: tuple[int, ...] = (64, 64)
    lr: float = 0.01
    max_epochs: int = 2000
    patience: int = 50
    val_fraction: float = 0.2
    seed: int = 0
    noise_scales: tuple[float, ...] = (0.1, 0.3)
    noise_replicates: int = 4
    ema: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "noise_scales", tuple(float(s) for s in self.noise_scales))
        if not self.hidden or min(self.hidden) < 1:
            raise ParameterDomainError(f"hidden widths must be positive, got {self.hidden}")
        if not self.lr > 0:
            raise ParameterDomainError(f"lr must be positive, got {self.lr}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ParameterDomainError("max_epochs and patience must be at least 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ParameterDomainError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not self.noise_scales or min(self.noise_scales) <= 0:
            raise ParameterDomainError(f"noise scales must be positive, got {self.noise_scales}")
        if self.noise_replicates < 1:
            raise ParameterDomainError("noise_replicates must be at least 1")
        if not 0.0 <= self.ema < 1.0:
            raise ParameterDomainError(f"ema must lie in [0, 1), got {self.ema}")

    def child(self, *tags: object) -> "LearnerConfig":
        """Same hyperparameters with a seed derived from ``tags``."""
        return replace(self, seed=derive_seed(self.seed, *tags))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["noise_scales"] = list(self.noise_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterDomainError(f"unknown learner settings: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
