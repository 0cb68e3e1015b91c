"""Exception hierarchy.

Everything a caller can fix by changing inputs derives from ``ValueError`` so
that the CLI maps it to the validation exit code.
"""


class AgrifuseError(Exception):
    """Base class for all package errors."""


class ShapeError(AgrifuseError, ValueError):
    """Operand dimensions are incompatible."""


class ConfigError(AgrifuseError, ValueError):
    """A hyperparameter or run configuration is invalid."""


class ContractError(AgrifuseError, ValueError):
    """A call violated an operation precondition."""


class InputError(AgrifuseError, ValueError):
    """Input data is missing or malformed."""


class ValidationError(InputError):
    """Parsed data violates a domain invariant."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


class AlignmentError(InputError):
    """Two data sources disagree on which dates exist."""

    def __init__(self, message, date=None):
        super().__init__(message)
        self.date = date


class CheckpointError(AgrifuseError, ValueError):
    """A checkpoint does not match the data or model it is used with."""
