"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Malformed input, file, or configuration (CLI exit code 1)."""


class NonFiniteError(ArithmeticError):
    """A NaN/Inf appeared in a value that must stay finite (CLI exit code 2)."""


class FormatError(ValidationError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
