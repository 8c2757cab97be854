"""The de Sitter-Schwarzschild model: horizons, weights, radial mode operator.

alpha(r)^2 = 1 - 2m/r - Lambda r^2/3 has two positive roots r_H < r_I when
0 < 9 m^2 Lambda < 1; beta = (1/2) d(alpha^2)/dr is the surface gravity
function, positive at r_H and negative at r_I.  The stationary operator is
the twisted Laplacian

    Delta_X = alpha^2 r^{-n} D_r (alpha^2 r^n D_r) + alpha^2 r^{-2} Delta_omega,

self-adjoint and non-negative for the measure Omega = alpha^{-2} r^n dr domega.
Near each horizon, after the rescaling alpha = 2 r_end |beta_end| x, the
conjugated operator x^{n/2} Delta_X x^{-n/2} is a small perturbation of the
Laplacian of a hyperbolic metric of curvature -beta_end^2 shifted by
-beta_end^2 n^2/4; `model_end_check` verifies the discrepancy is O(x^2).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, HorizonError, ModelValidityError

__all__ = [
    "DSSModel",
    "ModeCoefficients",
    "horizons",
    "alpha2",
    "beta_at",
    "x_of_r",
    "tilde_alpha",
    "psi_log_weight",
    "mode_coefficients",
    "mode_operator_matrix",
    "model_end_check",
]


def _smoothstep(t):
    """Quintic smoothstep: 0 -> 1 on [0,1] with vanishing 1st and 2nd derivatives."""
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t * t)


def horizons(m, Lambda):
    """Two positive roots of 1 - 2m/r - Lambda r^2/3, as (r_H, r_I), r_H < r_I.

    Solved by the trigonometric form of the depressed cubic
    r^3 - (3/Lambda) r + 6m/Lambda = 0, Newton-polished to ~1e-14 relative.
    9 m^2 Lambda >= 1 raises HorizonError; within 1e-12 of the extremal value
    the double root r = 3m is returned with a degenerate-horizon warning.
    """
    m = float(m)
    Lambda = float(Lambda)
    if m <= 0 or Lambda <= 0:
        raise HorizonError("m and Lambda must be positive")
    crit = 9.0 * m * m * Lambda
    if crit >= 1.0 + 1e-12:
        raise HorizonError(f"9 m^2 Lambda = {crit:.6g} >= 1: no two horizons")
    if crit >= 1.0 - 1e-12:
        warnings.warn(
            f"9 m^2 Lambda = {crit:.17g}: degenerate double horizon at r = 3m",
            RuntimeWarning,
        )
        return 3.0 * m, 3.0 * m
    # r^3 + p r + q with p = -3/Lambda, q = 6m/Lambda; three real roots
    p = -3.0 / Lambda
    q = 6.0 * m / Lambda
    rho = 2.0 * np.sqrt(-p / 3.0)
    arg = np.clip(3.0 * q / (p * rho), -1.0, 1.0)
    theta = np.arccos(arg) / 3.0
    roots = np.sort([rho * np.cos(theta - 2.0 * np.pi * k / 3.0) for k in range(3)])
    r_h, r_i = roots[1], roots[2]
    for _ in range(60):  # Newton polish on f = r^3 + p r + q
        f_h = r_h**3 + p * r_h + q
        f_i = r_i**3 + p * r_i + q
        r_h -= f_h / (3.0 * r_h**2 + p)
        r_i -= f_i / (3.0 * r_i**2 + p)
        if abs(f_h) < 1e-13 * abs(q) and abs(f_i) < 1e-13 * abs(q):
            break
    return float(r_h), float(r_i)


@dataclass(frozen=True)
class DSSModel:
    """Parameters (m, Lambda, n) with derived horizons and surface gravities."""

    m: float
    Lambda: float
    n: int
    r_H: float
    r_I: float
    beta_H: float
    beta_I: float

    @classmethod
    def create(cls, m, Lambda, n=2):
        if n < 2:
            raise DomainError("sphere dimension n must be >= 2")
        r_h, r_i = horizons(m, Lambda)
        model = cls(
            m=float(m),
            Lambda=float(Lambda),
            n=int(n),
            r_H=r_h,
            r_I=r_i,
            beta_H=beta_at_params(m, Lambda, r_h),
            beta_I=beta_at_params(m, Lambda, r_i),
        )
        return model

    @property
    def r3(self):
        """Third (negative) root of alpha^2; the roots sum to zero."""
        return -(self.r_H + self.r_I)

    @property
    def width(self):
        return self.r_I - self.r_H


def beta_at_params(m, Lambda, r):
    return m / r**2 - Lambda * r / 3.0


def beta_at(model, r):
    """beta(r) = (1/2) d(alpha^2)/dr = m/r^2 - Lambda r/3 (closed form)."""
    r = np.asarray(r, dtype=float)
    out = model.m / r**2 - model.Lambda * r / 3.0
    return out if out.ndim else float(out)


def alpha2(model, r):
    """alpha^2 in the factored form (Lambda/3r)(r-r_H)(r_I-r)(r+r_H+r_I).

    Equivalent to 1 - 2m/r - Lambda r^2/3 but free of cancellation near the
    horizons; accepts u_H = r - r_H or u_I = r_I - r keywords through
    alpha2_from_ends for fully stable end evaluation.
    """
    r = np.asarray(r, dtype=float)
    out = (model.Lambda / (3.0 * r)) * (r - model.r_H) * (model.r_I - r) * (r - model.r3)
    return out if out.ndim else float(out)


def alpha2_from_ends(model, u_h=None, u_i=None):
    """alpha^2 evaluated from the distance to one horizon (no cancellation)."""
    if (u_h is None) == (u_i is None):
        raise DomainError("provide exactly one of u_h, u_i")
    if u_h is not None:
        u = np.asarray(u_h, dtype=float)
        r = model.r_H + u
        out = (model.Lambda / (3.0 * r)) * u * (model.width - u) * (r - model.r3)
    else:
        u = np.asarray(u_i, dtype=float)
        r = model.r_I - u
        out = (model.Lambda / (3.0 * r)) * (model.width - u) * u * (r - model.r3)
    return out if out.ndim else float(out)


def _blend_windows(model):
    d = model.width
    return (
        model.r_H + 0.2 * d,
        model.r_H + 0.4 * d,
        model.r_I - 0.4 * d,
        model.r_I - 0.2 * d,
    )


def _two_window_blend(model, r, val_h, val_i):
    """val_h near r_H -> midpoint mean -> val_i near r_I, C^2 quintic ramps."""
    a1, b1, a2, b2 = _blend_windows(model)
    mid = 0.5 * (val_h + val_i)
    s1 = _smoothstep((r - a1) / (b1 - a1))
    s2 = _smoothstep((r - a2) / (b2 - a2))
    return val_h + (mid - val_h) * s1 + (val_i - mid) * s2


def x_of_r(model, r):
    """Rescaled boundary coordinate: alpha = 2 r_H beta_H x near r_H,
    alpha = 2 r_I |beta_I| x near r_I, blended smoothly in between.

    x vanishes simply at both horizons and is positive inside; outside the
    two blend windows the end formulas hold exactly.
    """
    r = np.asarray(r, dtype=float)
    if np.any((r < model.r_H - 1e-12) | (r > model.r_I + 1e-12)):
        raise DomainError("r outside [r_H, r_I]")
    c_h = 1.0 / (2.0 * model.r_H * model.beta_H)
    c_i = 1.0 / (2.0 * model.r_I * abs(model.beta_I))
    c = _two_window_blend(model, r, c_h, c_i)
    a2 = np.maximum(alpha2(model, np.clip(r, model.r_H, model.r_I)), 0.0)
    out = np.sqrt(a2) * c
    return out if out.ndim else float(out)


def tilde_alpha(model, r, b=1.0):
    """Weight alpha^(1/beta_H) near r_H, alpha^(1/|beta_I|) near r_I, to power b.

    The exponent is blended smoothly between the two end values; only the
    germ at each end is constrained (up to smooth positive factors), so the
    weight is normalized to 1 at the radius where beta vanishes (the
    maximum of alpha), keeping interior values order one.
    """
    r = np.asarray(r, dtype=float)
    e_h = 1.0 / model.beta_H
    e_i = 1.0 / abs(model.beta_I)
    e = _two_window_blend(model, r, e_h, e_i)
    a2 = np.maximum(alpha2(model, np.clip(r, model.r_H, model.r_I)), 0.0)
    r_top = (3.0 * model.m / model.Lambda) ** (1.0 / 3.0)
    e_top = _two_window_blend(model, np.asarray(r_top), e_h, e_i)
    log_norm = 0.5 * e_top * np.log(alpha2(model, r_top))
    with np.errstate(divide="ignore"):
        out = np.exp(b * (0.5 * e * np.log(a2) - log_norm))
    return out if out.ndim else float(out)


def psi_log_weight(model, r, N=1.0):
    """Log weight psi_N(r) = |log alpha|^{-N} near the ends, capped at 1.

    Smooth version of the borderline-weight factor: equals |log alpha|^{-N}
    where alpha < 1/4 (for the default models that is the whole interval)
    and 1 where alpha > 1/2.
    """
    r = np.asarray(r, dtype=float)
    a2 = np.maximum(alpha2(model, np.clip(r, model.r_H, model.r_I)), 1e-300)
    log_alpha = 0.5 * np.log(a2)
    raw = np.abs(log_alpha) ** (-N)
    s = _smoothstep((np.exp(log_alpha) - 0.25) / 0.25)
    out = raw + (1.0 - raw) * s
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ModeCoefficients:
    """Radial coefficient bundle of Delta_X restricted to one spherical harmonic."""

    model: DSSModel
    ell: int
    angular_eigenvalue: float
    r: np.ndarray
    alpha2: np.ndarray
    beta: np.ndarray


def mode_coefficients(model, ell, n_samples=2001, margin=1e-6):
    """Coefficients of the ell-th radial mode operator on an interior grid.

    Delta_omega is replaced by its eigenvalue ell(ell+n-1); samples are
    strictly inside (r_H, r_I).
    """
    if ell < 0:
        raise DomainError("ell must be >= 0")
    w = model.width
    r = np.linspace(model.r_H + margin * w, model.r_I - margin * w, n_samples)
    return ModeCoefficients(
        model=model,
        ell=int(ell),
        angular_eigenvalue=float(ell * (ell + model.n - 1)),
        r=r,
        alpha2=alpha2(model, r),
        beta=beta_at(model, r),
    )


def mode_operator_matrix(model, ell, r_grid):
    """Flux-form discretization of Delta_X,ell and its Omega quadrature weights.

    Returns (A, w) where A applies
        -alpha^2 r^{-n} d/dr (alpha^2 r^n du/dr) + alpha^2 lam_ell/r^2 u
    and w are the Omega = alpha^{-2} r^n dr weights; diag(w) @ A is exactly
    symmetric (the discrete self-adjointness of the twisted Laplacian).
    """
    r = np.asarray(r_grid, dtype=float)
    h = r[1] - r[0]
    if not np.allclose(np.diff(r), h):
        raise DomainError("mode_operator_matrix expects a uniform grid")
    n = model.n
    lam = ell * (ell + n - 1)
    a2 = alpha2(model, r)
    omega = r**n / a2
    p_half = alpha2(model, 0.5 * (r[:-1] + r[1:])) * (0.5 * (r[:-1] + r[1:])) ** n
    m = r.size
    A = np.zeros((m, m))
    for i in range(m):
        if 0 < i < m - 1:
            A[i, i - 1] = -p_half[i - 1]
            A[i, i] = p_half[i - 1] + p_half[i]
            A[i, i + 1] = -p_half[i]
        elif i == 0:
            A[i, i] = p_half[0]  # zero-flux closure at the cut
            A[i, i + 1] = -p_half[0]
        else:
            A[i, i - 1] = -p_half[-1]
            A[i, i] = p_half[-1]
        A[i, :] /= omega[i] * h * h
    A[np.arange(m), np.arange(m)] += a2 * lam / r**2
    return A, omega * h


def _r_of_x_end(model, x, end):
    """Invert alpha(r) = 2 r_end |beta_end| x inside the exact end branch."""
    x = np.asarray(x, dtype=float)
    if end == "H":
        c = 2.0 * model.r_H * model.beta_H
        r = model.r_H + (c * x) ** 2 / (2.0 * model.beta_H)
    else:
        c = 2.0 * model.r_I * abs(model.beta_I)
        r = model.r_I - (c * x) ** 2 / (2.0 * abs(model.beta_I))
    target = (c * x) ** 2
    for _ in range(80):
        f = alpha2(model, r) - target
        df = 2.0 * beta_at(model, r)
        step = f / df
        r = r - step
        if np.max(np.abs(step)) < 1e-15 * model.r_I:
            break
    return r


def model_end_check(model, end, tol=0.25, ell=0, test_function=None,
                    x_window=(1e-3, 3e-2), n_samples=25):
    """Verify x^{n/2} Delta_X x^{-n/2} - (Delta_model - beta_end^2 n^2/4) = O(x^2).

    Both operators are applied analytically (test function supplied with two
    derivatives) inside the exact rescaling branch of the chosen end, and
    the leading power of x in the discrepancy is fitted; the check passes
    when the fitted exponent is >= 2 - tol.  Returns a report dict; raises
    ModelValidityError on failure.
    """
    if end not in ("H", "I"):
        raise DomainError("end must be 'H' or 'I'")
    n = model.n
    lam = float(ell * (ell + n - 1))
    beta_end = model.beta_H if end == "H" else abs(model.beta_I)
    r_end = model.r_H if end == "H" else model.r_I
    c = 2.0 * r_end * beta_end
    sgn = 1.0 if end == "H" else -1.0

    if test_function is None:
        # smooth, nonvanishing at x = 0 so the x^2 structure is visible
        def test_function(x):
            u = (1.0 + x * x) * np.exp(-(x * x))
            du = (2.0 * x - 2.0 * x * (1.0 + x * x)) * np.exp(-(x * x))
            ddu = np.exp(-(x * x)) * (2.0 - 2.0 * (1.0 + 3.0 * x * x) + (2.0 * x - 2.0 * x * (1.0 + x * x)) * (-2.0 * x))
            return u, du, ddu

    x = np.geomspace(x_window[0], x_window[1], n_samples)
    # validate the window stays inside the exact branch
    a1, b1, a2w, b2 = _blend_windows(model)
    r = _r_of_x_end(model, x, end)
    if end == "H" and np.any(r > a1):
        raise DomainError("x_window leaves the exact H-branch; shrink it")
    if end == "I" and np.any(r < b2):
        raise DomainError("x_window leaves the exact I-branch; shrink it")

    u, du, ddu = test_function(x)
    # conjugated function v = x^{-n/2} u and derivatives
    v = x ** (-n / 2.0) * u
    dv = x ** (-n / 2.0) * (du - (n / 2.0) * u / x)
    ddv = x ** (-n / 2.0) * (ddu - n * du / x + (n / 2.0) * (n / 2.0 + 1.0) * u / x**2)

    beta = beta_at(model, r)
    dbeta = -2.0 * model.m / r**3 - model.Lambda / 3.0
    drdx = sgn * c * c * x / beta
    # radial part: -beta r^{-n} x d/dx (beta r^n x dv/dx), with
    # d/dx(beta r^n x) = dbeta*drdx*r^n*x + beta*n*r^(n-1)*drdx*x + beta*r^n
    inner = beta * r**n * x * dv
    dinner = (dbeta * drdx * r**n * x + beta * n * r ** (n - 1) * drdx * x + beta * r**n) * dv \
        + beta * r**n * x * ddv
    delta_x_v = -beta * r ** (-n) * x * dinner + (c * x) ** 2 * lam / r**2 * v
    lhs = x ** (n / 2.0) * delta_x_v

    # constant-curvature end model, per mode
    rhs = (
        -beta_end**2 * x**2 * ddu
        - beta_end**2 * (1.0 - n) * x * du
        + 4.0 * beta_end**2 * lam * x**2 * u
        - beta_end**2 * n**2 / 4.0 * u
    )
    disc = lhs - rhs
    good = np.abs(disc) > 1e-13 * np.max(np.abs(lhs))
    if np.count_nonzero(good) < 5:
        fitted = np.inf  # discrepancy at rounding level: stronger than O(x^2)
    else:
        fitted = float(np.polyfit(np.log(x[good]), np.log(np.abs(disc[good])), 1)[0])
    w_limit = float((disc / x**2)[0]) if np.all(np.isfinite(disc)) else np.nan
    curv = np.max(np.abs((beta_end / beta) ** 2 - 1.0) / x**2)
    report = {
        "end": end,
        "ell": ell,
        "fitted_exponent": fitted,
        "w_limit": w_limit,
        "curvature_ratio_over_x2": float(curv),
        "passes": fitted >= 2.0 - tol,
    }
    if not report["passes"]:
        raise ModelValidityError(
            f"end-model mismatch at {end}: fitted discrepancy exponent "
            f"{fitted:.3f} < {2.0 - tol:.3f}"
        )
    return report
