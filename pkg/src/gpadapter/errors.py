"""Exception hierarchy shared by every module."""


class GPAdapterError(Exception):
    """Base class for all errors raised by the package."""


class InvalidArgumentError(GPAdapterError, ValueError):
    pass


class NumericBreakdownError(GPAdapterError, ArithmeticError):
    """A factorization or iterative solver failed.

    ``diagnostics`` carries whatever the failing routine knew (residuals,
    eigenvalues, condition estimates) for logging.
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class UnsupportedModeError(GPAdapterError):
    pass


class InvalidStateError(GPAdapterError, RuntimeError):
    pass


class TrainingFailureError(GPAdapterError, RuntimeError):
    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics
