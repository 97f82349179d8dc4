"""Exception hierarchy.

``UserInputError`` covers bad specs and data (CLI exit code 2);
``NumericalError`` covers estimator failures (exit code 3).
"""
from __future__ import annotations


class ElastError(Exception):
    """Base class for every error raised by the package."""


class UserInputError(ElastError, ValueError):
    pass


class ParameterDomainError(UserInputError):
    """A spec or function argument lies outside its admissible domain."""


class DataError(UserInputError):
    """Dataset fails validation (non-positive outcome, ragged columns, ...)."""


class SingularDesignError(UserInputError):
    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


class DegenerateArmError(UserInputError):
    """A binary-treatment arm is empty."""


class NumericalError(ElastError, ArithmeticError):
    pass


class NonFiniteMomentError(NumericalError):
    """A Monte Carlo moment is dominated by a single draw or overflows."""


class SingularityError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message: str, last_iterate=None, iterations: int | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class SeparationError(ConvergenceError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message: str, epoch: int | None = None, fold: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.fold = fold
