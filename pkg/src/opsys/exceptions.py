class OpsysError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(OpsysError, ValueError):
    pass


class NumericalError(OpsysError, ArithmeticError):
    """A numerical routine failed; ``details`` carries residuals if known."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class SDPError(NumericalError):
    pass


class IllConditionedError(OpsysError, ValueError):
    pass


class PerturbationTooLarge(OpsysError, ValueError):
    def __init__(self, message, correction_norm):
        super().__init__(message)
        self.correction_norm = correction_norm


class ParseError(OpsysError, ValueError):
    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class ScheduleExhausted(OpsysError):
    pass
