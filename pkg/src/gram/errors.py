"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class GramError(Exception):
    """Base class for package errors."""


class ConfigError(GramError):
    """Bad shapes, invalid configuration values, or misuse of an API."""


class DataError(GramError):
    """Malformed dataset records, out-of-range tokens, or bad labels."""


class NumericError(GramError):
    """Non-finite values or a failed numeric invariant."""


class InvalidCheckError(GramError):
    """A verification harness was given a function it cannot certify."""
