"""Exception types mapped to CLI exit codes.

ConfigError exits 2, NumericError exits 3, DataFormatError exits 4.
Everything else is a bug and propagates as-is.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(ArithmeticError):
    """A numeric primitive produced a non-finite value; fail fast."""


class DataFormatError(ValueError):
    """Malformed dataset or checkpoint payload."""
