"""Exception hierarchy shared by every module.

The CLI maps each class to a process exit code (see ``EXIT_CODES``).
"""


class DaMambaError(Exception):
    """Base class for all package errors."""


class DimensionError(DaMambaError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(DaMambaError):
    """An API was called in a way its contract forbids."""


class ConfigError(DaMambaError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ValidationError(ConfigError):
    """Parameters violate a checked-mode invariant (e.g. unstable SSM)."""


class DataError(DaMambaError):
    """Input data is missing or malformed."""


class AlignmentError(DataError):
    """Frame counts of streams that must be aligned disagree."""


class NonFiniteError(DaMambaError, FloatingPointError):
    """A NaN or Inf was produced while checked mode is on."""


class DivergenceError(DaMambaError):
    """Training produced a non-finite loss."""


EXIT_CODES = {
    UsageError: 2,
    DataError: 3,
    ConfigError: 4,
    DimensionError: 4,
    DivergenceError: 5,
    NonFiniteError: 5,
}


def exit_code_for(exc: BaseException) -> int:
    for cls in type(exc).__mro__:
        if cls in EXIT_CODES:
            return EXIT_CODES[cls]
    return 1
