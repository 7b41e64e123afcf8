"""Exception hierarchy shared by every svkit module.

Each class carries an ``exit_code`` so the command line front end can map a
failure category to a distinct process status.
"""


class SvkitError(Exception):
    exit_code = 1


class ConfigError(SvkitError, ValueError):
    exit_code = 2


class MissingInputError(SvkitError, FileNotFoundError):
    exit_code = 3


class NonFiniteError(SvkitError, FloatingPointError):
    exit_code = 4


class TrainingDivergedError(NonFiniteError):
    """Raised when the loss becomes non-finite; holds the last good state."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DataError(SvkitError, ValueError):
    exit_code = 5


class DimensionError(DataError):
    pass


class EmptyUtteranceError(DataError):
    pass


class LengthError(DataError):
    pass


class CountError(DataError):
    pass


class MetricError(DataError):
    pass


class StateError(SvkitError, RuntimeError):
    exit_code = 6


class FormatError(SvkitError, ValueError):
    exit_code = 7


class LabelIndexError(DataError, IndexError):
    pass
