"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`StagecastError`.
:class:`DataError` subclasses map to CLI exit code 3 and :class:`NumericError`
subclasses to exit code 4.
"""


class StagecastError(Exception):
    pass


class DataError(StagecastError):
    """Bad input data, bad files or an impossible request on valid data."""


class NumericError(StagecastError):
    pass


# sensor network
class DuplicateSensor(DataError):
    pass


class UnknownEdgeEndpoint(DataError):
    pass


class CycleDetected(DataError):
    pass


class NonMonotoneTimeDistance(DataError):
    pass


class UnknownSensor(DataError):
    pass


class NotUpstream(DataError):
    pass


class MissingTimeDistance(DataError):
    pass


# ingestion
class MalformedRecord(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonAlignedTimestamp(MalformedRecord):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class NegativeRainfall(DataError):
    pass


class ParcelOutOfBounds(DataError, IndexError):
    pass


# dataset
class InsufficientUpstream(DataError):
    pass


class EmptyRange(DataError):
    pass


class DegenerateSplit(DataError):
    pass


class CorruptDataset(DataError):
    pass


# models / training
class UninitializedState(StagecastError):
    pass


class CorruptCheckpoint(DataError):
    pass


class ConfigMismatch(DataError):
    pass


class VariantMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class NonFiniteLoss(NumericError):
    """Training diverged. ``checkpoint`` holds the last finite parameters."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# synthetic
class InvalidConfig(DataError):
    pass


class OutOfRange(DataError):
    pass
