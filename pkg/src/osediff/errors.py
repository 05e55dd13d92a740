"""Exception types shared across the package.

Everything deriving from :class:`OsediffError` is a user-facing error
(bad config, bad input data, failed precondition) and maps to exit code 1
on the CLI; anything else escaping a command is an internal failure and
maps to exit code 2.
"""


class OsediffError(Exception):
    """Base class for user-facing errors."""


class ConfigurationError(OsediffError):
    """Invalid configuration value, unknown key, or missing prerequisite."""


class DimensionError(OsediffError):
    """Array shapes violate an operation's contract."""


class RangeError(OsediffError):
    """A scalar argument (timestep, count, scale) is out of its valid range."""


class ExtractorError(OsediffError):
    """A prompt extractor failed; the run must abort, never silently fall back."""


class DataError(OsediffError):
    """Unreadable or inconsistent dataset input."""


class TrainingFailureError(OsediffError):
    """A pretraining stage failed to reach its configured quality floor."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
