"""Exception types shared across the pipeline."""


class TrisegError(Exception):
    """Base class for all triseg errors."""


class MissingModality(TrisegError):
    pass


class GeometryMismatch(TrisegError):
    pass


class CorruptVolume(TrisegError):
    pass


class InvalidLabel(TrisegError):
    pass


class IoError(TrisegError):
    pass


class EmptyBrain(TrisegError):
    pass


class CropTooLarge(TrisegError):
    pass


class ShapeError(TrisegError):
    pass


class NumericalDivergence(TrisegError):
    pass


class ConfigError(TrisegError):
    pass


class MissingModel(TrisegError):
    pass


class InsufficientData(TrisegError):
    pass


class InvalidInput(TrisegError):
    pass
