"""Exceptions raised across the package.

Each error also derives from the builtin a caller would expect (ValueError for
bad inputs, RuntimeError for failed computations). `exit_code` is what the CLI
returns when the error escapes a command.
"""

from typing import Optional


class ZiplnError(Exception):
    exit_code = 1


class ConfigurationError(ZiplnError, ValueError):
    exit_code = 64


class ParameterError(ZiplnError, ValueError):
    pass


class DataError(ZiplnError, ValueError):
    exit_code = 4


class MalformedInputError(DataError):
    def __init__(self, path: str, line: Optional[int], reason: str):
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {reason}")


class IdentifiabilityError(ZiplnError, ValueError):
    exit_code = 3


class DegenerateMomentsError(ZiplnError, ValueError):
    pass


class MaskViolationError(ZiplnError, ValueError):
    pass


class DivergenceError(ZiplnError, RuntimeError):
    exit_code = 5

    def __init__(self, message: str, iteration: Optional[int] = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class StalledAscentError(ZiplnError, RuntimeError):
    exit_code = 5


class InternalError(ZiplnError, RuntimeError):
    exit_code = 5


class FingerprintMismatchError(ZiplnError, ValueError):
    exit_code = 6
