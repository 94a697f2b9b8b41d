"""Exception hierarchy shared across the library.

The CLI maps these onto exit codes: ValidationError -> 2,
NumericError -> 3, FormatError (and plain I/O errors) -> 4.
"""


class ValidationError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ValidationError):
    """Shapes or axis sizes do not agree."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or diverged."""


class FormatError(ValueError):
    """An on-disk artifact is corrupt or has an unknown layout."""
