"""Exception types shared across the package."""


class PirnsiError(Exception):
    """Base class for library errors."""


class ParameterError(PirnsiError, ValueError):
    """Invalid parameters or precondition violation."""


class CorruptionError(PirnsiError):
    """Answers or parity symbols fail a consistency check."""


class DecodeError(PirnsiError):
    """A source decoder abstained or produced an unusable estimate."""

    def __init__(self, msg: str, level: int | None = None, file: int | None = None):
        super().__init__(msg)
        self.level = level
        self.file = file


class BackendUnavailable(PirnsiError):
    """The requested source-coding backend cannot serve this channel bank."""


class TransportError(PirnsiError):
    """A server could not be reached or answered with an error frame."""
