"""
Exception hierarchy for the laboratory.

Validation problems derive from ValueError, numerical breakdowns from
RuntimeError, so callers that only know the builtins still catch them.
The CLI maps ParameterError / ConfigValidationError to exit status 2 and
every other LabError to 3.
"""
from __future__ import annotations

from typing import Any, Optional


class LabError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(LabError, ValueError):
    """Ordering or range violation in parameters, grids or deltas."""


class DegenerateInputError(ParameterError):
    """Input carries no mass on the grid."""


class PreconditionError(ParameterError):
    """Blow-up analytics called on a profile that still has super-threshold mass."""


class StepError(LabError, RuntimeError):
    """A time step violates the advection CFL bound."""


class SchemeError(StepError):
    """A step produced a negative density."""


class ConsistencyError(LabError, RuntimeError):
    """A structural identity (mass, decomposition) failed beyond tolerance."""


class SegmentDetectionError(LabError, RuntimeError):
    """Blow-up chaining did not converge. Carries the last density for dumping."""

    def __init__(self, message: str, state: Optional[Any] = None) -> None:
        super().__init__(message)
        self.state = state


class SweepMemberError(LabError, RuntimeError):
    """A solver error inside an eps-sweep member, tagged with its eps."""

    def __init__(self, eps: float, cause: BaseException) -> None:
        super().__init__(f"eps={eps:g}: {cause}")
        self.eps = eps
        self.cause = cause


class ConfigValidationError(LabError, ValueError):
    """Experiment configuration is invalid. Lists every offending key."""

    def __init__(self, problems: list[str]) -> None:
        super().__init__("; ".join(problems))
        self.problems = list(problems)
