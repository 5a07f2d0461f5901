"""Exception types shared across the package.

Every error raised by public entry points derives from CausalNcdError so
callers (and the CLI) can distinguish our failures from genuine bugs.
"""


class CausalNcdError(Exception):
    """Base class for all package-level errors."""


class ParameterError(CausalNcdError):
    """A hyperparameter or config value is outside its documented domain."""


class UsageError(CausalNcdError):
    """An operation was called with incompatible shapes or in a bad state."""


class DataError(CausalNcdError):
    """Input data violates a contract (labels out of range, bad split tag)."""


class DegenerateInputError(CausalNcdError):
    """Numerically degenerate input: zero-norm vector, empty cluster, ..."""


class CheckpointError(CausalNcdError):
    """A checkpoint or scene file failed to parse or failed its hash check."""
