"""
Error hierarchy for langsim.
Every error carries a stable code and the process exit code the CLI maps it to.
"""


class LangSimError(Exception):
    """Base class for all langsim errors."""

    code = "error"
    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        """Single-line, machine-parseable rendering used by the CLI."""
        text = " ".join(self.message.split())
        return f"error: {self.code}: {text}"


class UsageError(LangSimError):
    code = "usage"
    exit_code = 2


class ConfigError(LangSimError):
    code = "config"
    exit_code = 3


class ParseError(LangSimError):
    """Malformed input file; `line` is 1-based when known."""

    code = "parse"
    exit_code = 4

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataValidationError(LangSimError):
    code = "validation"
    exit_code = 5

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TooShortError(DataValidationError):
    code = "too_short"


class UnsupportedFormatError(LangSimError):
    code = "unsupported_format"
    exit_code = 6


class LanguageLookupError(LangSimError, LookupError):
    code = "lookup"
    exit_code = 7


class CoverageError(LangSimError):
    code = "coverage"
    exit_code = 8


class InsufficientDataError(LangSimError):
    code = "insufficient_data"
    exit_code = 9


class UndefinedCorrelationError(LangSimError):
    code = "undefined_correlation"
    exit_code = 9


class UndefinedLossError(LangSimError):
    code = "undefined_loss"
    exit_code = 10


class NumericError(LangSimError):
    code = "numeric"
    exit_code = 10


class CapabilityError(LangSimError):
    code = "capability"
    exit_code = 11


class ArtifactIOError(LangSimError, OSError):
    code = "io"
    exit_code = 12
