"""Exception types shared across the package.

The CLI maps these onto process exit codes (see `modemix.cli`).
"""


class ModemixError(Exception):
    """Base class for all package errors."""


class ConfigError(ModemixError):
    """Invalid or inconsistent run configuration."""


class SchemaError(ConfigError):
    """A dataset file does not match the declared column schema."""


class DataError(ModemixError):
    """Dataset rows violate an invariant (bad distance, unavailable choice, ...)."""


class DegenerateSchemeError(DataError):
    """Too few distinct distances to form the requested segment scheme."""


class ConvergenceError(ModemixError):
    """An estimation stage failed to produce a usable fit."""


class TrainingError(ModemixError):
    """Iterative training diverged (non-finite loss)."""


class NumericalError(ModemixError):
    """An internally guarded numerical impossibility was hit."""
