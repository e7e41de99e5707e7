"""Exception types raised across the mapper."""


class MapperError(Exception):
    """Base class for all mapper errors."""


class BehindCamera(MapperError):
    pass


class DimensionMismatch(MapperError, ValueError):
    pass


class LevelOutOfRange(MapperError, IndexError):
    pass


class NonPositiveScale(MapperError, ValueError):
    pass


class NonPositiveInput(MapperError, ValueError):
    pass


class NoTrackedPoints(MapperError):
    pass


class EmptyKeyframeSet(MapperError):
    pass


class NoKeyframes(MapperError):
    pass


class ParseError(MapperError):
    """Malformed manifest, tracker log or config file.

    Carries the offending file and line number so the message can point at it.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class MissingImage(MapperError, FileNotFoundError):
    pass


class InvariantViolation(MapperError):
    pass


class IoError(MapperError, OSError):
    """An export target could not be written."""
