"""Exception hierarchy. The CLI maps these onto exit codes."""


class StitchLabError(Exception):
    exit_code = 1


class InvalidInputError(StitchLabError, ValueError):
    exit_code = 2


class FormatError(InvalidInputError):
    """Malformed file. ``field`` names the offending part."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class StateError(StitchLabError, RuntimeError):
    exit_code = 2


class ConfigError(InvalidInputError):
    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class MissingArtifactError(StitchLabError, FileNotFoundError):
    exit_code = 3


class StaleArtifactError(StitchLabError):
    exit_code = 3


class NumericError(StitchLabError, ArithmeticError):
    exit_code = 4


class UndefinedCorrelationError(InvalidInputError):
    exit_code = 4
