"""Exception hierarchy shared by every subpackage."""


class MammosegError(Exception):
    """Base class for all errors raised by mammoseg."""


class ContractViolation(MammosegError, ValueError):
    """An operation received arguments outside its precondition."""


class ConfigurationError(MammosegError, ValueError):
    """A layer plan, config document or fold plan is not realisable."""


class BuildError(MammosegError):
    """A materialised network does not match its declared plan."""


class NonFiniteError(MammosegError, FloatingPointError):
    """A tensor or loss term became NaN or infinite."""


class FormatError(MammosegError, ValueError):
    """A file does not follow the expected binary or text layout.

    ``offset`` is the byte position where parsing stopped, when known.
    """

    def __init__(self, message, offset=None):
        self.detail, self.offset = message, offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)

    def prefixed(self, context: str) -> "FormatError":
        """Same error with ``context`` (usually a path) in front of the message."""
        return FormatError(f"{context}: {self.detail}", self.offset)
