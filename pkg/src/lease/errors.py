"""Exception types shared across modules.

The CLI maps these onto exit codes: DataError -> 3, NumericError -> 4.
"""


class DataError(ValueError):
    """Input data violates a format or invariant."""


class FormatError(DataError):
    """Binary file has a bad magic, unsupported version, or is truncated."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
