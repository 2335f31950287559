"""Exception types shared across the package.

The CLI maps :class:`ValidationError` to exit code 1 and
:class:`NumericalError` to exit code 2.
"""


class ValidationError(ValueError):
    """Bad input: wrong shapes, invalid configuration, malformed files."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value or failed to converge."""
