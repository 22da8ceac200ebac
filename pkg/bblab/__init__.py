"""Numerical lab for bilinear optimal control problems and their unstable free boundaries."""

from bblab.errors import AnalysisFailure, BBLabError, SolverFailure, ValidationFailure
from bblab.grid import Control, ScalarField, TorusGrid
from bblab.models import ExperimentConfig, OptimizeConfig, ProblemSpec, Tolerances

__version__ = "0.1.0"

__all__ = [
    "AnalysisFailure",
    "BBLabError",
    "Control",
    "ExperimentConfig",
    "OptimizeConfig",
    "ProblemSpec",
    "ScalarField",
    "SolverFailure",
    "Tolerances",
    "TorusGrid",
    "ValidationFailure",
]
