"""Exception types shared across the package.

Each maps to a distinct CLI exit code in evcap.cli.
"""


class EvcapError(Exception):
    """Base class for all package errors."""


class DimensionError(EvcapError):
    """Array shapes are incompatible with the requested operation."""


class ParameterError(EvcapError):
    """A numeric argument is outside its valid range."""


class ValidationError(EvcapError):
    """A domain object violates one of its invariants."""


class SchemaError(EvcapError):
    """A file or record does not match the expected schema."""


class ParseError(SchemaError):
    """A file failed to parse; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(EvcapError):
    """A run configuration is invalid or inconsistent."""


class CheckpointError(EvcapError):
    """A checkpoint file is corrupt, truncated, or mismatched."""


class NumericError(EvcapError):
    """A computation produced non-finite values."""


class DivergenceError(NumericError):
    """Training diverged; the last good checkpoint is preserved."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class PairingError(EvcapError):
    """Contrastive positive-pair bookkeeping is inconsistent."""


class LeakageError(EvcapError):
    """Data from a held-out split reached training or statistics."""
