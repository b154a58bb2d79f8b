"""Exception types shared across the package."""


class ThermschedError(Exception):
    """Base class for all package errors."""


class SingularA(ThermschedError):
    pass


class ComplexEigen(ThermschedError):
    pass


class InfeasibleAmbient(ThermschedError):
    pass


class DegenerateTarget(ThermschedError):
    pass


class InfeasibleThermal(ThermschedError):
    pass


class NoSolution(ThermschedError):
    pass


class MotExceedsBudget(ThermschedError):
    pass


class MotWithPolling(ThermschedError):
    pass


class ItemTooLarge(ThermschedError):
    pass


class GenRetryExceeded(ThermschedError):
    pass


class InfeasibleIdle(ThermschedError):
    pass


class Infeasible(ThermschedError):
    pass


class TooShort(ThermschedError):
    pass


class MissingProfile(ThermschedError):
    pass


class DuplicateMask(ThermschedError):
    pass


class RankDeficient(ThermschedError):
    pass


class Singular(ThermschedError):
    pass


class NonConvergence(ThermschedError):
    pass


class FlatTrace(ThermschedError):
    pass


class UnknownFrequency(ThermschedError):
    pass


class ConfigError(ThermschedError):
    pass


class ParseError(ThermschedError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
