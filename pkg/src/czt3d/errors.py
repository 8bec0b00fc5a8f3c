"""Exception hierarchy. Each class carries a stable process exit code.

Code 2 is left to argparse usage errors; 13 marks I/O failures and 14 a
failed gradient check.
"""


class Czt3dError(Exception):
    code = 1


class DomainError(Czt3dError, ValueError):
    code = 3


class ConfigError(Czt3dError, ValueError):
    code = 4


class ValidationError(Czt3dError, ValueError):
    code = 5


class FormatError(Czt3dError, ValueError):
    """Array or file shape does not match what was declared."""

    code = 6


class VersionError(Czt3dError):
    code = 7


class ConstraintViolation(Czt3dError, ValueError):
    code = 8


class TransportFault(Czt3dError, RuntimeError):
    """A negative intermediate charge appeared inside the recurrence."""

    code = 9


class DivergenceError(Czt3dError, RuntimeError):
    code = 10


class GradientFault(Czt3dError, RuntimeError):
    code = 11


class MissingGroundTruth(Czt3dError):
    code = 12


EXIT_CODES = {
    cls.__name__: cls.code
    for cls in (
        Czt3dError,
        DomainError,
        ConfigError,
        ValidationError,
        FormatError,
        VersionError,
        ConstraintViolation,
        TransportFault,
        DivergenceError,
        GradientFault,
        MissingGroundTruth,
    )
}

IO_ERROR = 13
GRADCHECK_FAILED = 14
