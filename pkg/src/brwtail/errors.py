"""Exception hierarchy shared by every module."""


class BrwError(Exception):
    """Base class for all errors raised by brwtail."""


class ModelError(BrwError, ValueError):
    """An offspring or step law violates its standing assumptions."""


class NotAProbabilityVector(ModelError):
    pass


class NotSubcritical(ModelError):
    pass


class DegenerateExtinction(ModelError):
    pass


class DomainError(BrwError, ValueError):
    pass


class NoTiltExists(BrwError):
    """E[exp(theta X)] never reaches 1/m for theta > 0."""


class NumericalFailure(BrwError, ArithmeticError):
    pass


class NotNormalized(BrwError):
    pass


class NotLattice(BrwError):
    pass


class GridTooSmall(BrwError):
    pass


class SolverInvariantError(BrwError, AssertionError):
    """A fixed-point iterate broke monotonicity or the exponential envelope."""


class StepBudgetExceeded(BrwError, RuntimeError):
    pass


class PopulationCapExceeded(BrwError, RuntimeError):
    pass


class RareEventBudgetExceeded(BrwError, RuntimeError):
    pass


class InconsistentModels(BrwError, ValueError):
    pass


class InsufficientCoverage(BrwError):
    pass
