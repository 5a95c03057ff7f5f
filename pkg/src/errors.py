"""Exception hierarchy shared by the library and the command-line runner.

Validation problems map to exit code 2, numerical failures to exit code 3.
"""

from typing import Any, Dict, Optional


class ToolkitError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = dict(details or {})

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable form written to stderr by run.py."""
        return {
            'error': type(self).__name__,
            'exit_code': self.exit_code,
            'message': self.message,
            'details': self.details,
        }


class ValidationError(ToolkitError, ValueError):
    exit_code = 2


class ConfigError(ValidationError):
    """Unknown keys, unreadable files, bad schema versions."""


class ZeroDetuningError(ValidationError):
    """A closed form needs a nonzero detuning; resonant drives are not modeled."""


class UnsupportedConfigurationError(ValidationError):
    pass


class NumericalError(ToolkitError, ArithmeticError):
    exit_code = 3


class TruncationError(NumericalError):
    def __init__(self, message: str, tail_mass: float, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details['tail_mass'] = float(tail_mass)
        super().__init__(message, details)
        self.tail_mass = float(tail_mass)


class DomainError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details['residual'] = float(residual)
        super().__init__(message, details)
        self.residual = float(residual)


class RankDeficiencyError(NumericalError):
    pass


class CapacityError(NumericalError):
    pass


class DegenerateHeraldError(NumericalError):
    pass


class InfeasibleConfigurationError(NumericalError):
    pass
