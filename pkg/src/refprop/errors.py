"""Exception types shared across the package.

The CLI maps these onto process exit codes: validation failures exit 1,
IO failures exit 2, numeric failures exit 3.
"""


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition or invariant."""


class SequenceIOError(OSError):
    """Raised when a sequence directory is missing, incomplete, or corrupt."""


class CheckpointError(ValidationError):
    """Raised on checkpoint format-version or parameter-shape mismatches."""


class NumericError(RuntimeError):
    """Raised when training encounters a non-finite loss."""
