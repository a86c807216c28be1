"""Exception and warning types.

Two families matter to callers: :class:`ValidationError` (bad input,
caught before any compute) and :class:`NumericalError` (a computation
went wrong). The CLI maps them to exit codes 1 and 2.
"""


class MBVIError(Exception):
    """Base class for all package errors."""


class ValidationError(MBVIError, ValueError):
    pass


class NumericalError(MBVIError, ArithmeticError):
    pass


class ConfigError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class GridError(ValidationError):
    """Observation times cannot be placed on grid nodes."""


class UnsupportedOrder(ValidationError):
    """Requested Gaussian moment exceeds the supported order."""


class NotPositiveDefinite(ValidationError):
    pass


class NonFiniteState(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonFinitePath(NumericalError):
    def __init__(self, message, path_index=None):
        super().__init__(message)
        self.path_index = path_index


class DomainError(NumericalError):
    """Log-normal closure evaluated outside the positive orthant."""


class SingularDiffusion(NumericalError):
    pass


class NoProgress(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class IllConditioned(UserWarning):
    """Fisher block condition number above 1e10 after jitter."""


class ClampWarning(UserWarning):
    """Central second moments were clamped to the PSD cone."""
