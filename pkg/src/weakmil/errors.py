"""Exception types shared across the package."""


class WeakMILError(Exception):
    """Base class for every error raised by weakmil."""


class InvalidInputError(WeakMILError, ValueError):
    """Array shapes, lengths or values that violate an operation's contract."""


class ConfigError(WeakMILError, ValueError):
    """An invalid or infeasible configuration value."""


class UndefinedClassError(WeakMILError, ValueError):
    """A metric requested for a class with no ground truth."""


class ParseError(WeakMILError):
    """A malformed record in a dataset, checkpoint or detections file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(ParseError):
    """Well-formed records that disagree with the declared dimensions."""
