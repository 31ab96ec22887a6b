"""Exception hierarchy shared by every stage.

The CLI maps each family onto an exit code: configuration problems exit 1,
data problems exit 2, and transport failures exit 3.
"""


class LLHKGError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(LLHKGError):
    exit_code = 1


class DataError(LLHKGError, ValueError):
    """Invalid input data (corpus records, graph documents, run records)."""

    exit_code = 2


class GraphFormatError(DataError):
    """Unknown export/import format."""


class ParseError(DataError):
    """A document could not be decoded; carries a location when known."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)
        self.line = line
        self.column = column


class ValidationError(DataError):
    """Decoded data violates a model invariant."""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"item {index}: {message}")
        self.index = index


class RunStoreError(DataError):
    pass


class UnparseableOutputError(LLHKGError):
    """No JSON array of facts could be recovered from an LLM response."""

    exit_code = 2

    def __init__(self, raw):
        preview = raw if len(raw) <= 80 else raw[:77] + "..."
        super().__init__(f"no parseable fact array in LLM output: {preview!r}")
        self.raw = raw


class GatewayError(LLHKGError):
    exit_code = 3


class TransportError(GatewayError):
    """Network failure, timeout, or retries exhausted."""


class RequestError(GatewayError):
    """Non-retryable HTTP 4xx response."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class EmptyResponseError(GatewayError):
    pass


class BackendError(GatewayError):
    """Backend returned a structurally unusable payload."""


class MockMissError(TransportError):
    """Mock mode has no fixture for a request."""


class OptimizationError(LLHKGError):
    exit_code = 2
