"""Exception hierarchy for ifeboot."""

from __future__ import annotations


class IfebootError(Exception):
    """Base class for all library errors."""


# -- panel ingestion ---------------------------------------------------------


class PanelError(IfebootError, ValueError):
    """Invalid panel input."""


class MissingCell(PanelError):
    def __init__(self, unit, period):
        self.unit = unit
        self.period = period
        super().__init__(f"panel is unbalanced: no row for (unit={unit!r}, period={period!r})")


class DuplicateCell(PanelError):
    def __init__(self, unit, period):
        self.unit = unit
        self.period = period
        super().__init__(f"duplicate row for (unit={unit!r}, period={period!r})")


class NonBinaryOutcome(PanelError):
    def __init__(self, unit, period, value):
        self.unit = unit
        self.period = period
        self.value = value
        super().__init__(f"outcome at (unit={unit!r}, period={period!r}) is {value!r}, expected 0 or 1")


class NonFiniteCovariate(PanelError):
    def __init__(self, unit, period, k):
        self.unit = unit
        self.period = period
        self.k = k
        super().__init__(f"covariate {k} is not finite at (unit={unit!r}, period={period!r})")


class ZeroVariance(PanelError):
    def __init__(self, k):
        self.k = k
        super().__init__(f"covariate {k} has zero sample variance and cannot be standardized")


class DimensionMismatch(IfebootError, ValueError):
    """Array shapes disagree with the panel dimensions."""


class NonFiniteIndex(IfebootError, FloatingPointError):
    """The linear index contains NaN or infinite entries."""


# -- estimation --------------------------------------------------------------


class Nonconvergence(IfebootError, RuntimeError):
    """An iterative solver did not converge (or diverged)."""


class MaxIterations(Nonconvergence):
    pass


class StepSizeUnderflow(Nonconvergence):
    pass


class SingularBlock(IfebootError, ArithmeticError):
    """A weighted Gram matrix in the orthogonalization is singular."""


class SingularW(IfebootError, ArithmeticError):
    """The bias-correction information matrix is not invertible."""


class SubfitFailure(IfebootError, RuntimeError):
    def __init__(self, half: str, cause: Exception):
        self.half = half
        self.cause = cause
        super().__init__(f"jackknife sub-panel fit failed on {half}: {cause}")


# -- bootstrap ---------------------------------------------------------------


class AllReplicatesFailed(IfebootError, RuntimeError):
    pass


class EmptyRun(IfebootError, ValueError):
    pass


class TooFewReplicates(IfebootError, ValueError):
    pass


class DomainError(IfebootError, ValueError):
    """Input outside the domain of a transformation."""


class InverseOutOfDomain(IfebootError, ValueError):
    """A transformed interval endpoint has no preimage."""


class TooManyFailures(IfebootError, RuntimeError):
    """More than the allowed share of Monte Carlo replications failed."""
