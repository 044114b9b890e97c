"""Exception hierarchy shared by every module.

Each class maps to one CLI exit code, see :mod:`peft_forge.cli`.
"""


class PeftForgeError(Exception):
    exit_code = 1


class ParameterError(PeftForgeError, ValueError):
    """An argument is outside its documented domain."""

    exit_code = 6


class ShapeError(ParameterError):
    """Matrix shapes are incompatible for the requested operation."""

    exit_code = 6


class NumericError(PeftForgeError, ArithmeticError):
    """A computation produced NaN or infinity."""

    exit_code = 5


class FormatError(PeftForgeError):
    """A file or byte buffer does not follow its documented layout."""

    exit_code = 3


class ConsistencyError(PeftForgeError):
    """Inputs are individually valid but contradict each other."""

    exit_code = 4
