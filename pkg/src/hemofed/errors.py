"""Exception hierarchy shared across the package."""


class HemofedError(Exception):
    """Base class for all package errors."""


class ShapeError(HemofedError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(HemofedError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ContractError(HemofedError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ProtocolError(HemofedError):
    """Federation participants disagree on the shape of the exchanged model."""


class UnrecoverableSumError(ProtocolError):
    """Masked updates are missing, so the pairwise masks no longer cancel."""


class FormatError(HemofedError):
    """A binary or text file does not follow its documented layout.

    ``offset`` is the byte offset (binary files) or 1-based line number
    (text files) where decoding failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ReportParseError(FormatError):
    """A report line is malformed. ``offset`` holds the 1-based line number."""

    def __init__(self, message: str, line: int, field: str | None = None):
        self.line = line
        self.field = field
        HemofedError.__init__(self, f"line {line}: {message}")
        self.offset = line


class CheckpointMismatchError(FormatError):
    """A checkpoint was written for a different model configuration."""
