"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
ValidationError -> 3, DivergenceError -> 4.
"""


class SemitapError(Exception):
    """Base class for all package errors."""


class ConfigError(SemitapError):
    """A configuration value is missing, malformed, or out of range."""


class ValidationError(SemitapError):
    """Runtime data violates a documented precondition (shape, range, ...)."""


class DivergenceError(SemitapError):
    """Training produced a non-finite loss or gradient."""
