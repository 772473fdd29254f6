"""Exception hierarchy shared across the package.

Every error carries a stable class name; the CLI prints that name on stderr
and maps the base class to an exit code.
"""


class SplatkitError(Exception):
    """Base class for all typed errors raised by splatkit."""

    exit_code = 2


class DataError(SplatkitError):
    """Input data is missing, malformed or inconsistent."""

    exit_code = 2


class NumericError(SplatkitError):
    """A numerical procedure failed (non-finite values, degenerate math)."""

    exit_code = 3


# -- reconstruction file parsing ---------------------------------------------

class ParseError(DataError):
    pass


class TruncatedFile(ParseError):
    pass


class UnsupportedModel(ParseError):
    pass


class MalformedText(ParseError):
    pass


class MalformedPose(ParseError):
    pass


class MalformedTrack(ParseError):
    pass


class MissingFile(DataError):
    pass


class InconsistentReconstruction(DataError):
    pass


# -- geometry / gaussians ----------------------------------------------------

class BehindCamera(NumericError):
    pass


class EmptyPointCloud(DataError):
    pass


class FormatError(DataError):
    pass


# -- training / evaluation ---------------------------------------------------

class NonFiniteLoss(NumericError):
    """Raised when the loss or any parameter stops being finite.

    ``state`` holds the parameter arrays at the moment of failure so callers
    can inspect or dump them.
    """

    def __init__(self, message, state=None, dump_path=None):
        super().__init__(message)
        self.state = state or {}
        self.dump_path = dump_path


class EmptyEvalSet(DataError):
    pass


class EmptyMask(DataError):
    pass


# -- dataset preparation -----------------------------------------------------

class TooFewFrames(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class ConfigError(SplatkitError):
    exit_code = 1


class MalformedCamera(ParseError):
    pass
