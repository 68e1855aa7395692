"""Exception types shared across the package.

The CLI maps these onto stable exit codes (config -> 2, I/O or file
format -> 3, numeric/training failures -> 4), so library code should
raise the most specific type that applies.
"""


class DualPromptError(Exception):
    """Base class for all package errors."""


class ConfigError(DualPromptError):
    """Invalid configuration: unknown key, missing key, bad value/type."""


class DataFormatError(DualPromptError):
    """A data or artifact file is malformed (bad magic, truncation, bad ids)."""


class DimensionError(DualPromptError):
    """Array shapes or counts do not line up."""


class SamplingError(DualPromptError):
    """A sampler has no valid candidates (e.g. no non-neighbor exists)."""


class DomainError(DualPromptError):
    """A numeric operation was evaluated outside its domain."""


class TrainingError(DualPromptError):
    """Optimization produced non-finite values or cannot proceed."""
