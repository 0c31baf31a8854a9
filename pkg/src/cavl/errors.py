"""Exception types raised across the package."""


class CAVLError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CAVLError, ValueError):
    pass


class IndexOutOfRange(CAVLError, IndexError):
    pass


class LengthMismatch(CAVLError, ValueError):
    pass


class NonScalarLoss(CAVLError, ValueError):
    pass


class TapeConsumed(CAVLError, RuntimeError):
    """backward() was called a second time on the same tape."""


class TooManyRois(CAVLError, ValueError):
    pass


class NoMaskedPositions(CAVLError, ValueError):
    pass


class NoMaskablePositions(CAVLError, ValueError):
    pass


class BatchTooSmall(CAVLError, ValueError):
    pass


class NonPositiveRatio(CAVLError, ArithmeticError):
    """The pair-wise contrastive ratio has a non-positive numerator or denominator."""

    def __init__(self, numerator: float, denominator: float):
        self.numerator = numerator
        self.denominator = denominator
        super().__init__(
            f"contrastive ratio undefined: matched sum={numerator!r}, "
            f"mismatched sum={denominator!r}"
        )


class InvalidBottleneck(CAVLError, ValueError):
    pass


class UnknownParameter(CAVLError, KeyError):
    pass


class MalformedFile(CAVLError, ValueError):
    pass


class EmptyAfterFilter(CAVLError, ValueError):
    pass


class MissingGradient(CAVLError, RuntimeError):
    pass


class CheckpointVersionMismatch(CAVLError, ValueError):
    pass


class TrainingAborted(CAVLError, RuntimeError):
    pass


class SplitTooSmall(CAVLError, ValueError):
    pass


class ConfigError(CAVLError, ValueError):
    pass
