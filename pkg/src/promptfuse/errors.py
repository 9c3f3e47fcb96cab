"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 1, DataError -> 2.
"""


class PromptfuseError(Exception):
    """Base class for everything this package raises on purpose."""


class ValidationError(PromptfuseError):
    """An input value violates a documented precondition or invariant."""


class DataError(PromptfuseError):
    """A file or directory is missing, truncated, or unreadable."""


class UnsupportedFormatError(DataError):
    """A media file uses a codec or layout this package does not handle."""
