"""Geodesic and Hamilton flows for the perturbed ball metrics.

Geodesics are integrated in the Euclidean interior chart with an adaptive
8th-order Runge-Kutta (DOP853), arclength parametrized.  Alongside the base
geodesic the module integrates variational (Jacobi) fields and a parallel
transverse frame, which give the normal-coordinate volume density J and the
pullback angular metric needed by the parametrix construction.

The half-space flow realizes the 0-cotangent Hamilton field
    xdot = x*lambda,  ydot = x*mu,  lambdadot = -|mu|^2,  mudot = lambda*mu,
whose energy 2p0 = lambda^2 + |mu|^2 is conserved and whose boundary limit
has |lambda| -> 1, the tangency diagnostic for the flow-out Lagrangian.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConjugatePointError, ConvergenceError, DomainError
from .hyperbolic import dist0_closed, log_map_ball
from .metrics import MetricSpec, christoffel, christoffel_bundle, metric_energy, metric_matrix

__all__ = [
    "GeodesicPath",
    "HalfspaceState",
    "geodesic_shoot",
    "distance_flow",
    "jacobi_density",
    "jacobi_transport",
    "halfspace_flow0",
    "validate_delta",
]

GUARD_SHELL = 1.0 - 1e-12
_DEFAULT_TOL = 1e-10


@dataclass
class GeodesicPath:
    """Sampled geodesic: times, points, velocities, conserved energy."""

    t: np.ndarray
    z: np.ndarray
    v: np.ndarray
    energy: float
    energy_drift: float
    truncated: bool = False


@dataclass
class HalfspaceState:
    """Phase-space point (x, y, lambda, mu) in upper-half-space 0-coordinates."""

    x: float
    y: np.ndarray
    lam: float
    mu: np.ndarray

    def __post_init__(self):
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        if self.x <= 0:
            raise DomainError("half-space coordinate x must be positive")
        if self.y.shape != self.mu.shape:
            raise DomainError("y and mu must have equal length")

    @property
    def energy(self):
        return self.lam**2 + float(np.sum(self.mu**2))


def _geodesic_rhs(spec):
    d = spec.dim

    def rhs(_, state):
        zz = state.reshape(-1, 2 * d)
        z, v = zz[:, :d], zz[:, d:]
        gam = christoffel(spec, z)
        acc = -np.einsum("bkij,bi,bj->bk", gam, v, v)
        return np.concatenate([v, acc], axis=1).ravel()

    return rhs


def _guard_event(d):
    def event(_, state):
        z = state.reshape(-1, 2 * d)[:, :d]
        return GUARD_SHELL**2 - np.max(np.sum(z * z, axis=1))

    event.terminal = True
    event.direction = -1.0
    return event


def geodesic_shoot(spec, z0, v0, T, rtol=_DEFAULT_TOL, atol=_DEFAULT_TOL, t_eval=None):
    """Shoot the unit-speed geodesic of g_delta from z0 with initial direction v0.

    v0 is normalized to unit metric length, so the time parameter is
    arclength.  If the path reaches the guard shell |z| = 1 - 1e-12 it is
    truncated and flagged.
    """
    z0 = np.asarray(z0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    if np.allclose(v0, 0.0):
        raise DomainError("initial direction must be nonzero")
    if not np.isfinite(T) or T <= 0:
        raise DomainError("T must be finite and positive")
    e0 = metric_energy(spec, z0, v0)
    v0 = v0 / np.sqrt(e0)
    d = spec.dim
    sol = solve_ivp(
        _geodesic_rhs(spec),
        (0.0, float(T)),
        np.concatenate([z0, v0]),
        method="DOP853",
        rtol=rtol,
        atol=atol,
        events=[_guard_event(d)],
        t_eval=t_eval,
        dense_output=False,
    )
    z = sol.y[:d].T
    v = sol.y[d:].T
    energy = metric_energy(spec, z, v)
    drift = float(np.max(np.abs(energy - 1.0)))
    return GeodesicPath(
        t=sol.t, z=z, v=v, energy=1.0, energy_drift=drift, truncated=sol.status == 1
    )


def _endpoint(spec, z0, w, rtol, atol):
    """Endpoint of the time-1 geodesic with initial velocity w (not normalized)."""
    d = spec.dim
    sol = solve_ivp(
        _geodesic_rhs(spec),
        (0.0, 1.0),
        np.concatenate([z0, w]),
        method="DOP853",
        rtol=rtol,
        atol=atol,
        events=[_guard_event(d)],
    )
    if sol.status == 1:
        # left the guard shell; return the last point, Newton will back off
        return sol.y[:d, -1], True
    return sol.y[:d, -1], False


def distance_flow(spec, z, zp, tol=1e-10, max_iter=50, rtol=1e-12):
    """g_delta-distance and unit initial direction by boundary-value shooting.

    Damped Newton iteration on the full initial velocity of the time-1
    geodesic, seeded with the closed-form hyperbolic log map; endpoint
    mismatch below tol (Euclidean chart) declares convergence.
    """
    z = np.asarray(z, dtype=float)
    zp = np.asarray(zp, dtype=float)
    if np.array_equal(z, zp):
        raise DomainError("distance_flow requires distinct endpoints")
    d = spec.dim
    w = log_map_ball(z, zp)
    res, _ = _endpoint(spec, z, w, rtol, rtol)
    f = res - zp
    fnorm = np.linalg.norm(f)
    for iteration in range(max_iter):
        if fnorm < tol:
            break
        # forward-difference Jacobian of the endpoint map
        jac = np.empty((d, d))
        step = 1e-7 * max(1.0, np.linalg.norm(w))
        for k in range(d):
            dw = np.zeros(d)
            dw[k] = step
            res_k, _ = _endpoint(spec, z, w + dw, rtol, rtol)
            jac[:, k] = (res_k - (f + zp)) / step
        try:
            delta = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular shooting Jacobian at iteration {iteration}") from exc
        lam = 1.0
        while lam > 1e-6:
            res_new, trunc = _endpoint(spec, z, w + lam * delta, rtol, rtol)
            fn_new = np.linalg.norm(res_new - zp)
            if not trunc and fn_new < fnorm:
                w = w + lam * delta
                f = res_new - zp
                fnorm = fn_new
                break
            lam *= 0.5
        else:
            raise ConvergenceError(
                f"shooting Newton stalled at |mismatch| = {fnorm:.3e} (iteration {iteration})"
            )
    else:
        raise ConvergenceError(
            f"shooting Newton did not reach tol {tol:.1e} in {max_iter} iterations "
            f"(|mismatch| = {fnorm:.3e}); uniqueness only guaranteed for small delta"
        )
    dist = float(np.sqrt(metric_energy(spec, z, w)))
    direction = w / dist
    return dist, direction


def _orthonormal_transverse(spec, z, direction):
    """g-orthonormal basis of the g-orthogonal complement of direction at z."""
    d = spec.dim
    g = metric_matrix(spec, z)
    basis = [direction / np.sqrt(direction @ g @ direction)]
    for e in np.eye(d):
        v = e.copy()
        for b in basis:
            v = v - (v @ g @ b) * b
        nrm = v @ g @ v
        if nrm > 1e-12:
            basis.append(v / np.sqrt(nrm))
        if len(basis) == d:
            break
    if len(basis) != d:
        raise ConvergenceError("failed to build transverse frame")
    return np.array(basis[1:])


def _variational_rhs(spec):
    """RHS for geodesic + n Jacobi fields + n parallel frame fields, batched.

    State layout per trajectory: [z(d), v(d), (Y_a, Ydot_a)*n, F_b*n].
    Jacobi fields solve the linearized geodesic equation
        Yddot^k = -(d_m Gamma^k_ij) Y^m v^i v^j - 2 Gamma^k_ij v^i Ydot^j,
    frames solve parallel transport Fdot^k = -Gamma^k_ij v^i F^j.
    """
    d = spec.dim
    n = d - 1

    def rhs(_, state):
        s = state.reshape(-1, (2 + 2 * n + n) * d)
        z = s[:, :d]
        v = s[:, d : 2 * d]
        ys = [s[:, (2 + 2 * a) * d : (3 + 2 * a) * d] for a in range(n)]
        gam, dgams = christoffel_bundle(spec, z, dirs=ys)
        acc = -np.einsum("bkij,bi,bj->bk", gam, v, v)
        out = [v, acc]
        for a in range(n):
            yd = s[:, (3 + 2 * a) * d : (4 + 2 * a) * d]
            ydd = -np.einsum("bkij,bi,bj->bk", dgams[a], v, v) - 2.0 * np.einsum(
                "bkij,bi,bj->bk", gam, v, yd
            )
            out.extend([yd, ydd])
        base = (2 + 2 * n) * d
        for b in range(n):
            f = s[:, base + b * d : base + (b + 1) * d]
            fd = -np.einsum("bkij,bi,bj->bk", gam, v, f)
            out.append(fd)
        return np.concatenate(out, axis=1).ravel()

    return rhs


def jacobi_transport(spec, zp, direction, r_values, rtol=_DEFAULT_TOL, atol=_DEFAULT_TOL,
                     jacobi_ic=None):
    """Integrate geodesic, Jacobi fields and parallel frame from zp along direction.

    jacobi_ic: optional (n, dim) initial derivative vectors for the Jacobi
    fields (default: the g-orthonormal transverse frame).  Returns a dict of
    samples at r_values: z, v, Y (n fields), F (n frames).
    """
    zp = np.asarray(zp, dtype=float)
    direction = np.asarray(direction, dtype=float)
    d = spec.dim
    n = d - 1
    e0 = metric_energy(spec, zp, direction)
    direction = direction / np.sqrt(e0)
    frame = _orthonormal_transverse(spec, zp, direction)
    if jacobi_ic is None:
        jacobi_ic = frame
    state0 = [zp, direction]
    for a in range(n):
        state0.extend([np.zeros(d), jacobi_ic[a]])
    state0.extend(frame[b] for b in range(n))
    r_values = np.asarray(r_values, dtype=float)
    sol = solve_ivp(
        _variational_rhs(spec),
        (0.0, float(r_values[-1])),
        np.concatenate(state0),
        method="DOP853",
        rtol=rtol,
        atol=atol,
        t_eval=r_values,
        events=[_guard_event(d)],
    )
    if sol.status == 1:
        raise DomainError(
            f"geodesic left the guard shell before r = {r_values[-1]:.3g} "
            f"(reached r = {sol.t[-1] if sol.t.size else 0.0:.3g})"
        )
    s = sol.y.T
    out = {
        "r": sol.t,
        "z": s[:, :d],
        "v": s[:, d : 2 * d],
        "Y": np.stack([s[:, (2 + 2 * a) * d : (3 + 2 * a) * d] for a in range(n)], axis=1),
        "Ydot": np.stack([s[:, (3 + 2 * a) * d : (4 + 2 * a) * d] for a in range(n)], axis=1),
        "F": np.stack(
            [s[:, (2 + 2 * n + b) * d : (2 + 2 * n + b + 1) * d] for b in range(n)], axis=1
        ),
    }
    return out


def jacobi_density(spec, zp, direction, r, rtol=_DEFAULT_TOL):
    """Normal-coordinate volume density J(r, theta), normalized J/r^n -> 1.

    J is the determinant of the transverse Jacobi matrix expressed in a
    parallel orthonormal frame; J <= 0 signals a conjugate point, which
    contradicts the small-delta regime and raises ConjugatePointError.
    """
    r = float(r)
    if r <= 0:
        raise DomainError("r must be positive")
    r_values = np.linspace(0.0, r, 33)[1:]
    data = jacobi_transport(spec, zp, direction, r_values, rtol=rtol, atol=rtol)
    g = metric_matrix(spec, data["z"])
    m = np.einsum("rij,rai,rbj->rab", g, data["Y"], data["F"])
    dets = np.linalg.det(m)
    if np.any(dets <= 0.0):
        bad = r_values[np.argmax(dets <= 0.0)]
        raise ConjugatePointError(
            f"volume density vanished at r = {bad:.4g}: conjugate point (delta too large?)"
        )
    return float(dets[-1])


def validate_delta(spec, n_rays=12, r_max=8.0, seed=0):
    """Empirical small-delta validator: scan rays for conjugate points.

    Returns a report dict; raises nothing.  The perturbative regime has no
    quantitative modulus in closed form, so failures are reported, not
    predicted.
    """
    rng = np.random.default_rng(seed)
    failures = []
    for k in range(n_rays):
        z0 = 0.3 * rng.standard_normal(spec.dim)
        z0 = z0 / max(1.0, np.linalg.norm(z0) / 0.8)
        v = rng.standard_normal(spec.dim)
        try:
            jacobi_density(spec, z0, v, r_max, rtol=1e-9)
        except ConjugatePointError as exc:
            failures.append((k, str(exc)))
        except DomainError:
            pass  # guard shell reached before r_max: not a conjugate point
    return {"rays": n_rays, "r_max": r_max, "conjugate_failures": failures, "ok": not failures}


def halfspace_flow0(state, T, n_samples=201, rtol=_DEFAULT_TOL, atol=_DEFAULT_TOL):
    """Integrate the half-space 0-Hamilton flow of the hyperbolic metric.

    Returns (t, states, diagnostics): diagnostics has the conserved energy
    2p0 = lambda^2+|mu|^2, its drift, and the boundary-limit value of lambda
    (lambda at the sample of smallest x).
    """
    if not isinstance(state, HalfspaceState):
        raise DomainError("state must be a HalfspaceState")
    n = state.y.size
    y0 = np.concatenate([[state.x], state.y, [state.lam], state.mu])

    def rhs(_, s):
        x, y, lam, mu = s[0], s[1 : 1 + n], s[1 + n], s[2 + n :]
        return np.concatenate([[x * lam], x * mu, [-np.sum(mu * mu)], lam * mu])

    t_eval = np.linspace(0.0, float(T), n_samples)
    sol = solve_ivp(rhs, (0.0, float(T)), y0, method="DOP853", rtol=rtol, atol=atol, t_eval=t_eval)
    xs = sol.y[0]
    lams = sol.y[1 + n]
    mus = sol.y[2 + n :]
    energy = lams**2 + np.sum(mus**2, axis=0)
    states = [
        HalfspaceState(x=xs[i], y=sol.y[1 : 1 + n, i].copy(), lam=lams[i], mu=mus[:, i].copy())
        for i in range(sol.t.size)
    ]
    if np.any(xs <= 0):
        warnings.warn("flow reached x <= 0 within numerical range", RuntimeWarning)
    diagnostics = {
        "energy": float(energy[0]),
        "energy_drift": float(np.max(np.abs(energy - energy[0]))),
        "lambda_boundary": float(lams[np.argmin(xs)]),
        "x_min": float(np.min(xs)),
    }
    return sol.t, states, diagnostics
