"""Exception hierarchy shared by every module."""


class DDPError(Exception):
    """Base class for all package errors."""


class ShapeError(DDPError, ValueError):
    pass


class DomainError(DDPError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class DegenerateInputError(DDPError, ValueError):
    pass


class NumericError(DDPError, ArithmeticError):
    """A non-finite value appeared where finiteness is required."""


class UsageError(DDPError, RuntimeError):
    pass


class ConfigError(DDPError, ValueError):
    pass


class ProtocolError(DDPError, RuntimeError):
    """The incremental protocol was violated (task order, label leakage)."""


class ScheduleError(ConfigError):
    pass


class FormatError(DDPError, ValueError):
    """A file on disk does not match its documented layout."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class VersionError(FormatError):
    pass
