"""Exception types shared across the package.

The CLI maps ``ContractError`` (and subclasses) to exit code 1 and
``NumericError`` to exit code 2.
"""


class ContractError(ValueError):
    """A precondition or interface contract was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(ContractError):
    """A configuration value is invalid or inconsistent."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
