"""Exception hierarchy.

Every error raised by the lab derives from :class:`BBLabError`. The three
category bases carry the process exit code the CLI reports for them.
"""

from __future__ import annotations


class BBLabError(Exception):
    exit_code = 1

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


class ValidationFailure(BBLabError):
    exit_code = 2


class SolverFailure(BBLabError):
    exit_code = 3


class AnalysisFailure(BBLabError):
    exit_code = 4


# validation


class UnsupportedOrder(ValidationFailure, ValueError):
    """Sobolev order outside {1, 2}."""


class UnresolvedRadius(ValidationFailure):
    """Radius too small for the grid spacing."""


class DegenerateInput(ValidationFailure):
    """Input lacks the structure an operation needs (e.g. one phase empty)."""


# solvers


class NonConvergence(SolverFailure):
    pass


class NegativeSolution(SolverFailure):
    pass


class SingularSystem(SolverFailure):
    pass


class StepUnderflow(SolverFailure):
    pass


# analysis


class NoAdmissiblePerturbation(AnalysisFailure):
    pass


class DegenerateGradient(AnalysisFailure):
    pass


class NonPeriodic(AnalysisFailure):
    pass
