"""Numerical laboratory for semiclassical resolvent estimates.

Subpackages cover: closed-form hyperbolic geometry on the ball
(`hyperbolic`), perturbed Poincare metrics and geodesic/Hamilton flows
(`metrics`, `geodesics`), the three-dimensional semiclassical parametrix
(`parametrix`), weighted Schur/operator-norm machinery and Neumann-series
resolvent assembly (`schur`), the de Sitter-Schwarzschild model
(`desitter`), per-mode radial resolvents, resonance and norm scans
(`radial`), and the resolvent gluing identities (`gluing`).
"""

from . import desitter, geodesics, gluing, hyperbolic, metrics, parametrix, radial, schur
from .errors import (
    AccuracyError,
    ConjugatePointError,
    ConvergenceError,
    DomainError,
    HorizonError,
    InvalidDeltaError,
    ModelValidityError,
    NearResonanceWarning,
    PerturbativeRegimeError,
    SchurRangeError,
    SingularInputError,
    StencilError,
    TruncationError,
    WeightWindowError,
)

__version__ = "0.1.0"
