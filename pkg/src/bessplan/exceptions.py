"""Exception hierarchy.

Everything raised on purpose by the package derives from ``BessPlanError``.
Input problems split into ``ParseError`` (the file or argument could not be
read) and ``ValidationError`` (it was read but describes something invalid);
the CLI maps these to exit codes 2 and 3.
"""


class BessPlanError(Exception):
    """Base class for package errors."""


class ParseError(BessPlanError):
    pass


class ValidationError(BessPlanError, ValueError):
    pass


# network topology / constants
class CycleDetected(ValidationError):
    pass


class Disconnected(ValidationError):
    pass


class MultipleSlack(ValidationError):
    pass


class UnknownBus(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NegativeVoltageSquare(ValidationError):
    pass


# constraint assembly
class SingularImpedance(ValidationError):
    pass


class InvalidBounds(ValidationError):
    pass


class HorizonMismatch(ValidationError):
    pass


# robust reformulation
class InvalidBudget(ValidationError):
    pass


class OracleTooLarge(BessPlanError):
    pass


# solver
class SolverError(BessPlanError):
    pass


class IterationLimit(SolverError):
    pass


class NumericalBreakdown(SolverError):
    pass


class NotOptimal(SolverError):
    pass


class DegenerateWarning(UserWarning):
    """The optimum is degenerate; value gradients are subgradients."""


# learning
class DimensionMismatch(ValidationError):
    pass


class CacheMismatch(BessPlanError):
    pass


class EmptyCalibration(ValidationError):
    pass


class EmptyTestSet(ValidationError):
    pass


class MissingThreshold(BessPlanError):
    pass


class ConfigInvalid(ValidationError):
    pass


class SolveFailed(SolverError):
    pass
