"""Exception hierarchy shared across the package."""


class CadnetError(Exception):
    """Base class for all library errors."""


class ConfigurationError(CadnetError, ValueError):
    """Shapes, widths or hyperparameters that cannot work together."""


class UsageError(CadnetError, RuntimeError):
    """An API was called out of order or with inconsistent arguments."""


class NonFiniteError(CadnetError, FloatingPointError):
    """A NaN or Inf appeared in a tensor; training treats this as divergence."""


class DataError(CadnetError, ValueError):
    """Malformed or out-of-range data."""


class ParseError(DataError):
    """A dataset record could not be parsed."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class VersionError(DataError):
    """File written by an incompatible format version."""


class CheckpointError(CadnetError, ValueError):
    """Checkpoint could not be loaded into the requested configuration."""
