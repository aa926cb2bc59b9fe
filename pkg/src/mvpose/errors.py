"""Exception types raised by the pipeline."""


class MVPoseError(Exception):
    """Base class for all package errors."""


class ValidationError(MVPoseError, ValueError):
    """Malformed input (shapes, ranges, schema)."""


class NumericalError(MVPoseError, ArithmeticError):
    """A numerical operation has no valid answer for the given input."""


class DegenerateScalePair(NumericalError):
    pass


class BehindCamera(NumericalError):
    pass


class NoRealRoot(NumericalError):
    pass


class NoPositiveRoot(NumericalError):
    pass


class DegenerateRays(NumericalError):
    pass


class InsufficientSupport(NumericalError):
    pass


class DegenerateConfiguration(NumericalError):
    pass


class ZeroSourceVariance(NumericalError):
    pass


class ZeroLimbs(NumericalError):
    pass


class ZeroPrediction(NumericalError):
    pass


class PoseOutOfView(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    def __init__(self, node: str, message: str = ""):
        self.node = node
        super().__init__(message or f"non-finite gradient produced at node {node!r}")


class NonFiniteUpdate(NumericalError):
    pass


class DivergenceDetected(NumericalError):
    pass


class AllPairsFailed(NumericalError):
    """Every view pair in a batch failed alignment."""
