"""Closed-form hyperbolic geometry on the unit ball.

Distance for the standard Poincare metric 4|dz|^2/(1-|z|^2)^2, the boundary
defining functions (rho_l, rho_r, R) that resolve its behaviour when one or
both arguments approach the sphere at infinity, and the bounded remainder F
in the factorization  d = -log(rho_l * rho_r) + F.

All two-point functions broadcast over leading axes: inputs of shape
(..., dim) produce outputs of shape (...).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SingularInputError

__all__ = [
    "BoundaryTriple",
    "dist0_closed",
    "boundary_triple",
    "log_structure_F",
    "mobius_translate",
    "log_map_ball",
]


@dataclass(frozen=True)
class BoundaryTriple:
    """Defining values (rho_l, rho_r, front) for a pair of interior points.

    front is R = ((1-|z|^2)^2 + (1-|z'|^2)^2 + |z-z'|^2)^(1/2); rho_l and
    rho_r are (1-|z|^2)/R and (1-|z'|^2)/R.  All three are positive for
    strictly interior points.
    """

    rho_l: np.ndarray
    rho_r: np.ndarray
    front: np.ndarray


def _check_interior(z, name="z"):
    z = np.asarray(z, dtype=float)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise DomainError(f"{name} must have at least 2 coordinates, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError(f"{name} has non-finite coordinates")
    r2 = np.sum(z * z, axis=-1)
    if np.any(r2 >= 1.0):
        raise DomainError(f"{name} must lie strictly inside the unit ball (max |z| = {np.max(np.sqrt(r2)):.17g})")
    return z, r2


def _check_pair(z, zp):
    z, rz2 = _check_interior(z, "z")
    zp, rzp2 = _check_interior(zp, "z'")
    if z.shape[-1] != zp.shape[-1]:
        raise DomainError(f"dimension mismatch: {z.shape[-1]} vs {zp.shape[-1]}")
    return z, zp, rz2, rzp2


def _acosh1p(t):
    """arccosh(1 + t) for t >= 0 without forming 1 + t.

    The direct branch log1p(t + sqrt(t(t+2))) is stable for moderate t; for
    t < 1e-8 the expansion sqrt(2t)*(1 - t/12 + 3t^2/160) is exact to
    machine precision.  Keeping t (never u = 1+t) avoids the cancellation
    that would otherwise dominate near the diagonal.
    """
    t = np.maximum(np.asarray(t, dtype=float), 0.0)
    small = t < 1e-8
    t_safe = np.where(small, 1.0, t)
    direct = np.log1p(t_safe + np.sqrt(t_safe * (t_safe + 2.0)))
    series = np.sqrt(2.0 * t) * (1.0 - t / 12.0 + 3.0 * t * t / 160.0)
    return np.where(small, series, direct)


def dist0_closed(z, zp):
    """Hyperbolic distance arccosh(1 + 2|z-z'|^2 / ((1-|z|^2)(1-|z'|^2)))."""
    z, zp, rz2, rzp2 = _check_pair(z, zp)
    q = np.sum((z - zp) ** 2, axis=-1)
    out = _acosh1p(2.0 * q / ((1.0 - rz2) * (1.0 - rzp2)))
    return out if out.ndim else float(out)


def boundary_triple(z, zp):
    """Boundary defining values (rho_l, rho_r, R) for the pair (z, z').

    R defines the front face of the blown-up double space; rho_l and rho_r
    define the left and right boundary faces.  rho_l*R and rho_r*R recover
    1-|z|^2 and 1-|z'|^2 exactly.
    """
    z, zp, rz2, rzp2 = _check_pair(z, zp)
    a = 1.0 - rz2
    b = 1.0 - rzp2
    q = np.sum((z - zp) ** 2, axis=-1)
    front = np.sqrt(a * a + b * b + q)
    return BoundaryTriple(rho_l=a / front, rho_r=b / front, front=front)


def log_structure_F(z, zp):
    """Bounded remainder F = d + log(rho_l * rho_r) of the lifted distance.

    Uses the defining functions sqrt(2)*(1-|.|^2)/R, i.e. normalized so the
    product rho_l*rho_r equals 1 on the lifted diagonal; with that choice F
    is positive away from the diagonal and F^2 vanishes quadratically on it.
    Evaluation at z = z' raises SingularInputError.
    """
    z, zp, rz2, rzp2 = _check_pair(z, zp)
    if np.any(np.all(z == zp, axis=-1)):
        raise SingularInputError("F is evaluated away from the diagonal (z != z')")
    d = dist0_closed(z, zp)
    t = boundary_triple(z, zp)
    out = d + np.log(2.0 * t.rho_l * t.rho_r)
    return out if np.ndim(out) else float(out)


def mobius_translate(a, w):
    """Mobius translation T_a(w) of the ball model, mapping 0 to a.

    T_a(w) = ((1 + 2 a.w + |w|^2) a + (1 - |a|^2) w) / (1 + 2 a.w + |a|^2 |w|^2).
    Hyperbolic isometry for the curvature -1 metric; broadcasts like the
    two-point functions.
    """
    a = np.asarray(a, dtype=float)
    w = np.asarray(w, dtype=float)
    aw = np.sum(a * w, axis=-1, keepdims=True)
    a2 = np.sum(a * a, axis=-1, keepdims=True)
    w2 = np.sum(w * w, axis=-1, keepdims=True)
    num = (1.0 + 2.0 * aw + w2) * a + (1.0 - a2) * w
    den = 1.0 + 2.0 * aw + a2 * w2
    return num / den


def log_map_ball(z, zp):
    """Initial velocity (Euclidean chart) of the unit-speed g0-geodesic z -> z'.

    Returns w with |w|_{g0} = dist0(z, z'), i.e. the Riemannian log map of
    the curvature -1 ball metric.  Exact closed form; used, e.g., to seed
    boundary-value shooting for perturbed metrics.
    """
    z, zp, rz2, _ = _check_pair(z, zp)
    zeta = mobius_translate(-z, zp)
    norm = np.linalg.norm(zeta, axis=-1, keepdims=True)
    d = np.asarray(dist0_closed(z, zp))[..., None]
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norm > 0, zeta / np.where(norm > 0, norm, 1.0), 0.0)
    return 0.5 * (1.0 - rz2)[..., None] * d * unit
