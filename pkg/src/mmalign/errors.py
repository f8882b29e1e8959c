"""Exception hierarchy shared by all mmalign modules.

The CLI maps these onto distinct exit codes (config=2, data=3, numeric=4).
"""


class MMAlignError(Exception):
    """Base class for all mmalign errors."""


class ConfigError(MMAlignError):
    """Invalid configuration value or combination."""


class DataError(MMAlignError):
    """Problem with dataset files or their contents."""


class LoadError(DataError):
    """A required dataset file is missing or unreadable."""


class FormatError(DataError):
    """A dataset file is structurally malformed."""


class ValidationError(DataError):
    """Dataset contents violate an invariant (bad ids, shape mismatch...)."""


class DimensionError(MMAlignError):
    """Shape-incompatible operands passed to a tensor operation."""


class NumericError(MMAlignError):
    """Non-finite value encountered where a finite one is required."""
