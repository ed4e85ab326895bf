"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class VlgpError(Exception):
    """Base class for all package errors."""


class ConfigError(VlgpError):
    """Invalid configuration, parameters, or unsupported capability."""


class CapabilityError(ConfigError):
    """An operation was requested from a variant that does not support it."""


class CapacityError(ConfigError):
    """A dense/size guard was exceeded."""


class DataError(VlgpError):
    """Invalid input data (support violations, duplicates, malformed files)."""


class NumericalError(VlgpError):
    """Numerical failure at run time."""


class FactorizationError(NumericalError):
    """A matrix factorization failed (non-positive-definite input)."""


class BreakdownError(NumericalError):
    """An iterative method broke down (non-PD operator, negative eigenvalue)."""


class ConvergenceError(NumericalError):
    """An iteration failed to converge within its limit."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state
