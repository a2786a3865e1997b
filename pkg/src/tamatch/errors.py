"""Exception types raised across the package."""


class TamatchError(Exception):
    pass


class AllZeroVector(TamatchError, ValueError):
    pass


class NegativeEntry(TamatchError, ValueError):
    pass


class DimensionMismatch(TamatchError, ValueError):
    pass


class UnsupportedSupport(TamatchError, ValueError):
    """q has zero mass where p does not, so KL(p || q) is infinite."""


class LambdaOutOfRange(TamatchError, ValueError):
    pass


class InvalidClassCount(TamatchError, ValueError):
    pass


class EmptyVector(TamatchError, ValueError):
    pass


class NotASimplex(TamatchError, ValueError):
    pass


class DegenerateModelDistribution(TamatchError, ValueError):
    pass


class DegenerateEntropy(TamatchError, ValueError):
    pass


class EmptyBatch(TamatchError, ValueError):
    pass


class ProbabilityOutOfRange(TamatchError, ValueError):
    pass


class ThresholdOutOfRange(TamatchError, ValueError):
    pass


class QuadratureNonConvergence(TamatchError, RuntimeError):
    pass


class InvalidGamma(TamatchError, ValueError):
    pass


class DegenerateSpec(TamatchError, ValueError):
    pass


class NonFiniteLogit(TamatchError, FloatingPointError):
    pass


class DivergedTraining(TamatchError, RuntimeError):
    """Loss went non-finite. ``history`` holds the rows recorded before it did."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class LabelOutOfRange(TamatchError, ValueError):
    pass


class EmptyInput(TamatchError, ValueError):
    pass


class MalformedTable(TamatchError, ValueError):
    pass


class ConfigError(TamatchError, ValueError):
    pass
