"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems (2),
data problems (3) and numerical failures (4).
"""


class AADError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(AADError, ValueError):
    exit_code = 2


class DataError(AADError, ValueError):
    exit_code = 3


class NumericError(AADError, ArithmeticError):
    exit_code = 4


# corpus
class MalformedWav(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class EmptyDataset(DataError):
    pass


class AmbiguousFilename(DataError):
    pass


class InvalidConfig(ConfigError):
    pass


# dsp
class ClipTooShort(DataError):
    pass


class InvalidBand(ConfigError):
    pass


class ShapeMismatch(DataError):
    pass


# augment
class ShiftOutOfRange(ConfigError):
    pass


class SpecTooSmall(DataError):
    pass


class BatchTooSmall(DataError):
    pass


# net
class InputTooSmall(DataError):
    pass


class NonFiniteActivation(NumericError):
    pass


class DivergedLoss(NumericError):
    pass


class CorruptCheckpoint(DataError):
    pass


# anomaly
class DimensionMismatch(DataError):
    pass


class SingularCovariance(NumericError):
    pass


class TooFewEmbeddings(DataError):
    pass


class TooFewSamples(DataError):
    pass


class DegenerateSample(NumericError):
    pass


class QOutOfRange(ConfigError):
    pass


class EmptyInput(DataError):
    pass


# metrics
class OneClassOnly(DataError):
    pass


class InvalidP(ConfigError):
    pass


class InvalidGrid(ConfigError):
    pass


class IoFailure(AADError, OSError):
    exit_code = 3
