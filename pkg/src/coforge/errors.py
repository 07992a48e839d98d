"""Exception hierarchy shared across coforge."""


class CoforgeError(Exception):
    """Base class for all library errors."""


class ShapeError(CoforgeError, ValueError):
    """Raised when tensor shapes are incompatible.

    ``axis`` names the offending dimension when one can be pinned down.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class DegenerateVarianceError(CoforgeError, ValueError):
    pass


class LabelRangeError(CoforgeError, ValueError):
    pass


class BackwardError(CoforgeError, RuntimeError):
    """Invalid use of the tape (non-scalar loss, repeated backward, ...)."""


class NonFiniteError(CoforgeError, FloatingPointError):
    """A loss or gradient went NaN/inf; training aborts."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class ConfigError(CoforgeError, ValueError):
    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)


class DataError(CoforgeError):
    pass


class CorruptDataError(DataError, ValueError):
    pass


class MissingDataError(DataError, FileNotFoundError):
    pass


class CheckpointError(DataError):
    pass


class CorruptCheckpointError(CheckpointError, ValueError):
    pass


class UnsupportedVersionError(CheckpointError, ValueError):
    pass
