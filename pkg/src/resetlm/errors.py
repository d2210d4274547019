"""Exception types shared across the package.

ConfigError maps to CLI exit code 1, everything else to exit code 2.
"""


class ResetLMError(Exception):
    """Base class for all package errors."""


class ConfigError(ResetLMError):
    """Invalid configuration or misuse of an operation's contract."""


class DataError(ResetLMError):
    """Malformed or insufficient input data."""


class NumericError(ResetLMError):
    """Non-finite values where finite ones are required (diverged training etc.)."""


class IntegrityError(ResetLMError):
    """Corrupt, truncated, or incompatible serialized artifact."""


class PipelineError(ResetLMError):
    """Stage ordering / orchestration violations."""
