"""Exception hierarchy shared by all modules."""


class RankOdoError(Exception):
    """Base class for every error raised by this package."""


class GimbalLockError(RankOdoError):
    pass


class ParseError(RankOdoError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidRotationError(RankOdoError):
    pass


class DegenerateGeometryError(RankOdoError):
    pass


class BadMagicError(RankOdoError):
    pass


class TruncatedFileError(RankOdoError):
    pass


class DimensionOverflowError(RankOdoError):
    pass


class NonPositiveScoreError(RankOdoError):
    pass


class ShapeMismatchError(RankOdoError):
    pass


class NonFiniteLossError(RankOdoError):
    pass


class LengthMismatchError(RankOdoError):
    pass


class ConstantInputWarning(RuntimeWarning):
    """A correlation input was constant; the coefficient was reported as 0."""
