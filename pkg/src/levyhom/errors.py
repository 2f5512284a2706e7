"""Exception hierarchy shared by all levyhom modules."""


class LevyhomError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(LevyhomError, ValueError):
    """Invalid user input: bad config keys, mismatched shapes, violated preconditions."""


class FieldError(ConfigError):
    """A field or kernel table failed validation (non-finite value, bound violation...)."""


class NumericalError(LevyhomError, RuntimeError):
    """A numerical procedure failed to deliver its contract."""


class ConvergenceError(NumericalError):
    """Iteration cap reached before the requested tolerance.

    ``trace`` holds the residual history so callers can inspect the stall.
    """

    def __init__(self, message, residual=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = list(trace) if trace is not None else []


class PositivityError(NumericalError):
    """A quantity that must be strictly positive came out nonpositive."""
