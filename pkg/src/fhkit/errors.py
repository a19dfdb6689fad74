class FhkitError(Exception):
    """Base class for toolkit errors."""


class DataError(FhkitError, ValueError):
    """Invalid input data, files, or configuration."""


class NumericalError(FhkitError, ArithmeticError):
    """Numerical failure such as an all-paths underflow."""
