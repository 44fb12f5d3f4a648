"""Exception hierarchy shared by every solver module."""


class FbsdeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(FbsdeError, ValueError):
    pass


class NumericalBlowupError(FbsdeError, FloatingPointError):
    pass


class SingularRegressionError(FbsdeError, ArithmeticError):
    pass


class StepSizeError(FbsdeError, ArithmeticError):
    pass


class OracleError(FbsdeError, RuntimeError):
    pass


class RateViolationError(FbsdeError, AssertionError):
    """A measured convergence record broke one of the asserted bounds.

    The offending record is attached as ``record`` so callers can still
    persist it.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
