"""
Exception hierarchy for chaosflow.

Every error raised on purpose by the package derives from ChaosflowError, so the
CLI can tell numerical/config failures apart from programming errors.
"""


class ChaosflowError(Exception):
    """Base class for all chaosflow errors."""


# Arguments and shapes

class InvalidGrid(ChaosflowError, ValueError):
    """Time or space grid with non-positive size or step."""


class LengthMismatch(ChaosflowError, ValueError):
    """Sequence length does not match the path grid."""


class HorizonMismatch(ChaosflowError, ValueError):
    """Objects defined on different time horizons were combined."""


class OrderMismatch(ChaosflowError, ValueError):
    """Kernels of different chaos order were combined."""


class OrderTooHigh(ChaosflowError, ValueError):
    """Requested chaos order exceeds what the representation supports."""


class KernelError(ChaosflowError, ValueError):
    """Malformed kernel declaration or unsupported evaluation mode."""


# Barriers and survival probabilities

class UnsupportedBarrier(ChaosflowError, ValueError):
    """Operation not available for this barrier variant."""


class BarrierAlreadyHit(ChaosflowError, ValueError):
    """The path starts on or above the barrier."""


class GridTooCoarse(ChaosflowError):
    """PDE time step too large for the space step."""


class DomainError(ChaosflowError, ValueError):
    """Point or truncation level outside the tabulated region."""


class LineNotBelowBarrier(ChaosflowError, ValueError):
    """The auxiliary line of the first-passage representation touches the barrier."""


class QuadratureNotConverged(ChaosflowError):
    """Quadrature error estimate or tail bound above tolerance."""


class NearBarrier(ChaosflowError):
    """Survival probability below the drift floor."""


class NotMonotone(ChaosflowError, ValueError):
    """Barrier sequence is not increasing towards its limit."""


# Sampling

class PathTouchesBarrier(ChaosflowError, ValueError):
    """A path that must stay below the barrier reaches it."""


class RejectionBudgetExceeded(ChaosflowError):
    """Rejection sampler ran out of attempts."""


class TGridTooCoarse(ChaosflowError, ValueError):
    """Horizon grid of a field family is coarser than the requested tolerance."""


class SamplerFailure(ChaosflowError):
    """A sampler failed while producing a chunk of paths."""


class DegenerateVariance(ChaosflowError):
    """Zero standard error with a nonzero mean."""


# Experiments

class ConfigError(ChaosflowError):
    """Unreadable or malformed experiment configuration."""


class ExperimentFailure(ChaosflowError):
    """At least one statistical test of an experiment failed."""

    def __init__(self, failed):
        self.failed = list(failed)
        super().__init__("failed tests: " + ", ".join(self.failed))
