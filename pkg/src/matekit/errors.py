"""Error types shared across the package.

Two failure classes are distinguished everywhere: domain errors (bad
arguments, shapes, configs) and numeric failures (non-finite values,
divergence). The CLI maps them to exit codes 2 and 3 respectively.
"""


class DomainError(ValueError):
    """Invalid argument, shape, or configuration."""


class NumericError(ArithmeticError):
    """Non-finite value or numerical divergence detected."""


class ConfigError(DomainError):
    """Malformed or unknown configuration content."""
