"""Exception hierarchy shared by all modules.

Every error carries a stable ``reason`` string; the CLI reports it verbatim.
"""

from __future__ import annotations


class VolstopError(Exception):
    """Base class; subclasses are grouped by the CLI exit code they map to."""

    reason = "Error"


class ValidationError(VolstopError):
    """Bad input: maps to exit code 2."""

    reason = "ValidationError"


class EmptyStates(ValidationError):
    reason = "EmptyStates"


class BadGenerator(ValidationError):
    reason = "BadGenerator"


class NotTridiagonal(ValidationError):
    """Raised with the first offending entry (0-based ``i``, ``j``)."""

    reason = "NotTridiagonal"

    def __init__(self, i: int, j: int, value: float):
        self.i, self.j, self.value = i, j, value
        super().__init__(
            f"generator entry ({i + 1},{j + 1}) = {value!r} is nonzero but |i-j| > 1"
        )


class NotSkipFree(ValidationError):
    reason = "NotSkipFree"


class StartOrderViolated(ValidationError):
    reason = "StartOrderViolated"


class DeltaOutOfRange(ValidationError):
    reason = "DeltaOutOfRange"


class NonpositiveSample(ValidationError):
    reason = "NonpositiveSample"


class HorizonExceeded(ValidationError):
    reason = "HorizonExceeded"


class RangeExceeded(ValidationError):
    reason = "RangeExceeded"


class RuleStopsAtNegativeGain(ValidationError):
    reason = "RuleStopsAtNegativeGain"


class ConfigError(ValidationError):
    reason = "ConfigError"


class ModelConditionFailed(ValidationError):
    """A named diffusion model fails its closed-form validity test."""

    reason = "ModelConditionFailed"


class SchemeBreakdown(VolstopError):
    """Positivity of the volatility scheme was lost at ``step``."""

    reason = "SchemeBreakdown"

    def __init__(self, step: int, value: float):
        self.step, self.value = step, value
        super().__init__(f"nonpositive volatility sample {value!r} at step {step}")


class SolverError(VolstopError):
    """Numerical failure of a deterministic solver: maps to exit code 3."""

    reason = "SolverError"


class NoConvergence(SolverError):
    reason = "NoConvergence"

    def __init__(self, max_iters: int, residual: float):
        self.max_iters, self.residual = max_iters, residual
        super().__init__(f"no convergence after {max_iters} iterations (residual {residual:.3e})")


class GridTooCoarse(SolverError):
    reason = "GridTooCoarse"


class NoContact(SolverError):
    reason = "NoContact"


class RegressionSingular(SolverError):
    reason = "RegressionSingular"


class TruncationDominates(VolstopError):
    reason = "TruncationDominates"
