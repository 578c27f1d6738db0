"""Exception hierarchy shared by the library and the command line."""


class QuadSeriesError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 1


class PrecisionError(QuadSeriesError, ValueError):
    exit_code = 2


class SystemFormatError(QuadSeriesError, ValueError):
    """A system-definition document is malformed or inconsistent."""

    exit_code = 2


class BallEscapeError(QuadSeriesError):
    """The trajectory left the trapping ball.

    ``arc`` carries the truncated trajectory up to and including the escaping step.
    """

    exit_code = 3

    def __init__(self, message: str, arc=None):
        super().__init__(message)
        self.arc = arc


class TruncationError(QuadSeriesError):
    """The series tail criterion was not met within ``max_degree`` terms."""

    exit_code = 4


class DegeneracyError(QuadSeriesError):
    """Perturbation vectors collapsed during re-orthonormalization."""

    exit_code = 5
