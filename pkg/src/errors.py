"""Exception types shared across the NILM pipeline."""

from __future__ import annotations


class NilmError(Exception):
    """Base class for every error raised by this package."""


class RejectedInputError(NilmError, ValueError):
    """Input violates an operation's precondition."""


class ParseError(NilmError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(NilmError, ValueError):
    """A model file could not be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class StateError(NilmError, RuntimeError):
    pass


class ProtocolError(NilmError):
    """Broker frame sequence violated the wire contract."""

    code = "PROTOCOL"


class RoutingError(ProtocolError):
    code = "ROUTING"


class DeclarationError(ProtocolError):
    code = "DECLARATION"


class QueueOverflowError(ProtocolError):
    code = "OVERFLOW"


class BadFrameError(ProtocolError):
    """A frame could not be decoded; ``fatal`` frames desync the stream."""

    code = "BAD_FRAME"

    def __init__(self, message: str, fatal: bool = False):
        self.fatal = fatal
        super().__init__(message)


ERROR_CODES = {
    cls.code: cls
    for cls in (ProtocolError, RoutingError, DeclarationError, QueueOverflowError, BadFrameError)
}


class BenchError(NilmError, RuntimeError):
    pass
