"""Exception hierarchy shared across the package."""


class GridlockError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(GridlockError, ValueError):
    """A value violates a documented invariant."""


class FormatError(GridlockError, ValueError):
    """A binary or text file does not match its declared layout."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.path = path


class ParameterError(GridlockError, ValueError):
    """An argument is outside its allowed range."""


class ScoringError(GridlockError, ValueError):
    """Concept scoring could not be computed."""


class NumericError(GridlockError, ArithmeticError):
    """Training produced non-finite values."""
