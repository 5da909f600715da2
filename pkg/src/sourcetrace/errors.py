"""Exception hierarchy shared by the whole toolkit.

The CLI maps these onto its stable exit codes: usage problems exit 2,
data/format problems exit 3, numerical failures exit 4.
"""


class SourceTraceError(Exception):
    """Base class for all toolkit errors."""


class UsageError(SourceTraceError):
    """Invalid command or argument combination (CLI exit code 2)."""


class DataError(SourceTraceError):
    """Invalid or inconsistent input data (CLI exit code 3)."""


class FormatError(DataError):
    """Malformed binary or text file.

    ``offset`` is the byte offset (or line number for line-oriented
    files) at which the problem was detected; it is included in str().
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class ValidationError(DataError):
    """Well-formed data that violates a documented invariant."""


class DegenerateInputError(DataError):
    """Input too small or too uniform for the operation to be defined."""


class ShapeError(DataError):
    """Dimension or shape mismatch between inputs."""


class NumericalError(SourceTraceError):
    """Numerical failure (CLI exit code 4)."""


class NotPsdError(NumericalError):
    """Matrix is asymmetric beyond tolerance or has a significantly
    negative eigenvalue where a PSD matrix is required."""


class TrainingError(NumericalError):
    """Non-finite loss or gradient encountered during optimization."""
