"""Exception types shared across the package."""


class RigRefineError(Exception):
    """Base class for all package errors."""


class AngleOutOfRange(RigRefineError, ValueError):
    pass


class TimeOutOfRange(RigRefineError, ValueError):
    pass


class UnknownSensor(RigRefineError, KeyError):
    pass


class EmptyList(RigRefineError, ValueError):
    pass


class MismatchedForward(RigRefineError, RuntimeError):
    """Backward pass called with a sample stream that differs from the forward pass."""


class EmptyMesh(RigRefineError, ValueError):
    pass


class MissingIntrinsics(RigRefineError, ValueError):
    pass


class ShapeMismatch(RigRefineError, ValueError):
    pass


class RigMismatch(RigRefineError, ValueError):
    pass


class NotGroundTruth(RigRefineError, ValueError):
    pass


class NoGroundTruth(RigRefineError, ValueError):
    pass


class NoLidar(RigRefineError, ValueError):
    pass


class DimensionMismatch(RigRefineError, ValueError):
    pass


class DegenerateGeometry(RigRefineError, ValueError):
    pass


class NonFiniteLoss(RigRefineError, FloatingPointError):
    pass


class CheckpointFormatError(RigRefineError, ValueError):
    pass
