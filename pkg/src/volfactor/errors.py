"""Exception hierarchy shared by every module."""


class VolFactorError(Exception):
    """Base class. Carries an exit code for the command line."""

    exit_code = 3


class ValidationError(VolFactorError, ValueError):
    exit_code = 2


class InvalidCorrelation(ValidationError):
    pass


class InvalidExponent(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class FullyCorrelatedStocks(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None, field=None):
        super().__init__(message)
        self.line = line
        self.field = field


class ConfigError(ValidationError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DegenerateRoots(VolFactorError):
    pass


class QuadratureError(VolFactorError):
    pass


class NegativeBase(VolFactorError):
    pass


class OutOfDomain(VolFactorError):
    pass


class StabilityFailure(VolFactorError):
    pass


class NewtonDivergence(VolFactorError):
    pass


class NonFiniteUtility(VolFactorError):
    pass


class StepTooSmall(VolFactorError):
    pass


class BoundDegenerate(VolFactorError):
    pass


class SingularHessian(VolFactorError):
    pass


class IoError(VolFactorError):
    pass
