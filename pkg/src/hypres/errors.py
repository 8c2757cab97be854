"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the admissible domain (e.g. a point not strictly inside the ball)."""


class SingularInputError(ValueError):
    """Operation evaluated at a point where it is genuinely singular (e.g. the diagonal)."""


class ModelValidityError(RuntimeError):
    """A model assumption failed numerically (non-SPD metric, end-model mismatch, ...)."""


class ConvergenceError(RuntimeError):
    """An iterative solve (shooting Newton, root refinement) did not converge."""


class ConjugatePointError(RuntimeError):
    """A conjugate point was detected along a geodesic (volume density J <= 0)."""


class StencilError(ValueError):
    """A finite-difference stencil does not fit inside the sampled grid."""


class SchurRangeError(ValueError):
    """Weight exponents outside the range covered by the four-case Schur bound."""


class WeightWindowError(ValueError):
    """Weight exponent outside the admissible window of the kernel bound in use."""


class PerturbativeRegimeError(RuntimeError):
    """Neumann-series condition violated: weighted error norm is not < 1."""


class HorizonError(ValueError):
    """Parameters do not produce two distinct positive horizons."""


class TruncationError(RuntimeError):
    """Grid truncation too small: potential tail above the requested threshold."""

    def __init__(self, message, tail_size=None):
        super().__init__(message)
        self.tail_size = tail_size


class AccuracyError(RuntimeError):
    """An internal consistency metric (e.g. Wronskian drift) exceeded its tolerance."""


class InvalidDeltaError(ValueError):
    """Cutoff width incompatible with the horizon separation (overlapping thresholds)."""


class NearResonanceWarning(UserWarning):
    """Spectral point is close to a resonance; conditioning is degraded."""
