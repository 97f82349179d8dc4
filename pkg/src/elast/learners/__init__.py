"""Nuisance learners: regression with input gradients, density scores, density ratios."""
from .config import LearnerConfig
from .ratio import RATIO_CLIP, RatioModel, fit_density_ratio
from .regression import RegressorModel, fit_regression, gradient_wrt_x
from .score import ScoreModel, fit_conditional_score, fit_marginal_score

__all__ = [
    "LearnerConfig",
    "RATIO_CLIP",
    "RatioModel",
    "RegressorModel",
    "ScoreModel",
    "fit_conditional_score",
    "fit_density_ratio",
    "fit_marginal_score",
    "fit_regression",
    "gradient_wrt_x",
]
