"""Exception hierarchy shared by every multifuse module."""


class MultifuseError(Exception):
    """Base class for all library errors."""


class ShapeError(MultifuseError, ValueError):
    pass


class NumericError(MultifuseError, ArithmeticError):
    pass


class ConfigError(MultifuseError, ValueError):
    pass


class DisconnectedError(MultifuseError):
    """A parameter was not reachable from the loss during backward."""


class FormatError(MultifuseError, ValueError):
    """Malformed file on disk. Carries the path and the byte offset of the fault."""

    def __init__(self, message, path=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.path = path
        self.offset = offset


class MissingModalityError(MultifuseError, FileNotFoundError):
    pass


class ChecksumError(MultifuseError):
    pass


class NoGroundTruthError(MultifuseError, ValueError):
    pass


class MissingConfidenceError(MultifuseError, ValueError):
    pass


class DegenerateBoxError(MultifuseError, UserWarning):
    """Box collapses to no positive pixel after shrinking.

    Issued through ``warnings.warn`` by default; raised when strict.
    """
