"""Exception types shared across the package.

The CLI maps these onto exit codes: ``UsageError`` and ``ConfigurationError``
exit with 1, everything else derived from ``SruAsrError`` exits with 2.
"""


class SruAsrError(Exception):
    pass


class DimensionError(SruAsrError, ValueError):
    """Array shapes do not line up."""


class ConfigurationError(SruAsrError, ValueError):
    """A model or component was configured with invalid settings."""


class DataError(SruAsrError, ValueError):
    """Input data is empty, malformed, or missing a required field."""


class UsageError(SruAsrError, ValueError):
    """An argument is outside the range an operation accepts."""


class TrainingError(SruAsrError, RuntimeError):
    """Optimization hit a non-finite value."""
