"""Exception hierarchy.

Everything raised on bad input derives from :class:`DataError` so callers
(and the CLI) can tell user mistakes apart from bugs.
"""


class C2GError(Exception):
    """Base class for all package errors."""


class DataError(C2GError, ValueError):
    """Input data or arguments violate a documented precondition."""


class RowError(DataError):
    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


# ingestion
class MissingColumn(DataError):
    pass


class OutOfBounds(RowError):
    pass


class NonFinite(RowError):
    pass


class EmptyFile(DataError):
    pass


# container formats
class BadMagic(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class BadChannelIndex(DataError):
    pass


# compression
class EmptyBatch(DataError):
    pass


class NonPositiveDensity(DataError):
    pass


class MixedChannelCounts(DataError):
    pass


# augmentation
class WindowLargerThanImage(DataError):
    pass


# networks
class ShapeUnderflow(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class ArchitectureMismatch(DataError):
    pass


# training
class ClassWithTooFewSamples(DataError):
    pass


class SplitDegenerate(DataError):
    pass


class EmptyDataset(DataError):
    pass


# synthetic data
class DegenerateSpec(DataError):
    pass
