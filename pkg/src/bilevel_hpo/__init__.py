"""Bilevel hyperparameter optimization by unrolled differentiation and cross-validation,
with the matching stability and generalization bounds."""

from .bilevel import BilevelProblem, CVConfig, RunTrace, UDConfig, cv_run, hypergradient, ud_run
from .errors import ContractViolation, NumericError

__all__ = [
    "BilevelProblem",
    "CVConfig",
    "ContractViolation",
    "NumericError",
    "RunTrace",
    "UDConfig",
    "cv_run",
    "hypergradient",
    "ud_run",
]
__version__ = "0.1.0"
