"""
Exception types raised by the engine.
Each one also subclasses the builtin a caller would naturally catch.
"""


class ContinualError(Exception):
    """Base class for every engine error."""


class DimensionError(ContinualError, ValueError):
    pass


class DomainError(ContinualError, ValueError):
    pass


class NumericalError(ContinualError, RuntimeError):
    pass


class TapeError(ContinualError, RuntimeError):
    pass


class FrozenModelError(ContinualError, RuntimeError):
    pass


class CheckpointFormatError(ContinualError, ValueError):
    pass


class CorruptHeaderError(CheckpointFormatError):
    pass


class ShapeTableError(CheckpointFormatError):
    pass


class TruncatedPayloadError(CheckpointFormatError):
    pass


class CifarFormatError(ContinualError, ValueError):
    def __init__(self, message: str, expected: int, actual: int, offset: int):
        super().__init__(message)
        self.expected = expected
        self.actual = actual
        self.offset = offset

    def __reduce__(self):
        return (self.__class__, (str(self), self.expected, self.actual, self.offset))


class UndefinedMetricError(ContinualError, ValueError):
    pass


class UndefinedSimilarityError(ContinualError, ValueError):
    def __init__(self, message: str, tap: str = ""):
        super().__init__(message)
        self.tap = tap

    def __reduce__(self):
        return (self.__class__, (str(self), self.tap))


class ArtifactError(ContinualError, RuntimeError):
    pass


class TaskError(ContinualError, RuntimeError):
    """Wraps a failure raised while a specific task was being processed."""

    def __init__(self, task_index: int, cause):
        super().__init__(f"task {task_index}: {cause}")
        self.task_index = task_index
        self.cause = cause

    # Worker processes send errors back pickled; the cause travels as text.
    def __reduce__(self):
        return (self.__class__, (self.task_index, str(self.cause)))
