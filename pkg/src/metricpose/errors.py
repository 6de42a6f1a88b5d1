"""Exception hierarchy shared by all modules."""


class MetricPoseError(Exception):
    """Base class for library errors."""


class DomainError(MetricPoseError, ValueError):
    pass


class ShapeError(MetricPoseError, ValueError):
    pass


class DegenerateConfigurationError(MetricPoseError):
    pass


class IllConditionedGradientError(MetricPoseError):
    """Raised when the Kabsch backward pass would divide by a near-zero gap."""

    def __init__(self, gap, message=None):
        self.gap = float(gap)
        super().__init__(message or f"ill-conditioned singular-value gap: {self.gap:.3e}")


class EmptyDistributionError(MetricPoseError):
    pass


class SupportError(MetricPoseError):
    pass


class InsufficientDataError(MetricPoseError):
    pass


class NoHypothesisError(MetricPoseError):
    pass


class EmptyError(MetricPoseError, ValueError):
    pass


class GenerationError(MetricPoseError):
    pass


class DivergenceError(MetricPoseError):
    """Training produced a non-finite loss; ``snapshot`` holds diagnostics."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class ConfigError(MetricPoseError, ValueError):
    pass
