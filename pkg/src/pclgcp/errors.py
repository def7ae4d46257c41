class DataError(ValueError):
    """Invalid input data or configuration (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """A numerical procedure failed or produced an unusable result (CLI exit code 1)."""
