"""
Exception hierarchy for stein-select.

Every error carries the exit code the CLI maps it to, so library code can raise
the specific failure and ``main.py`` only needs one except clause.
"""


class SteinSelectError(Exception):
    exit_code = 1


class ConfigError(SteinSelectError, ValueError):
    """Invalid configuration or hyperparameters."""

    exit_code = 2


class UnsupportedConfigurationError(ConfigError):
    """A score or option requested outside the context that defines it."""


class InputError(SteinSelectError, ValueError):
    """Shapes or dimensions that do not match the model or kernel."""

    exit_code = 2


class InsufficientDataError(InputError):
    pass


class DomainError(InputError):
    """Argument outside the mathematical domain of an operation."""


class KernelContractError(SteinSelectError):
    exit_code = 2


class NumericError(SteinSelectError, ArithmeticError):
    """Non-SPD matrices, singular systems and non-finite values."""

    exit_code = 3


class IngestionError(SteinSelectError):
    exit_code = 4


class ResultsIOError(SteinSelectError, OSError):
    exit_code = 4
