"""Three-dimensional semiclassical parametrix: amplitudes, kernels, error.

The approximate resolvent kernel has the oscillatory form

    G(h, sigma, z, z') = e^{-i (sigma/h) r(z,z')} h^{-2} (U0 + h U1),

with r the g_delta-distance and the amplitudes determined along geodesic
rays from z' by transport equations: U0 = (1/4pi) J^{-1/2} solves
d/dr(J^{1/2} U0) = 0 exactly (J the normal-coordinate volume density), and

    U1 = -(1/(2 i sigma)) J^{-1/2} int_0^r J^{1/2} (Lap + x^2 W - 1) U0 ds,

so that the remaining error kernel is E = h e^{-i(sigma/h) r} (Lap+x^2W-1) U1.
For the unperturbed metric U1 and E vanish identically (the hyperbolic
kernel e^{-i sigma r}/(4 pi sinh r) is exact).

The workhorse data structure is the AmplitudeFan: a geodesic polar grid
around a base point carrying J, the transport integral, and the error field
(Lap+x^2W-1)U1, from which kernel values at arbitrary point pairs are
interpolated.  Radial transport quantities are evaluated pointwise from the
variational ODE state (no finite differencing along the ray), which keeps
the unperturbed collapse exact to integrator precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.interpolate import CubicSpline

from .errors import ConjugatePointError, DomainError, SingularInputError, StencilError
from .geodesics import distance_flow, jacobi_density
from .hyperbolic import dist0_closed, log_map_ball, mobius_translate
from .metrics import (
    GammaApplicator,
    MetricSpec,
    boundary_x,
    metric_matrix,
)

__all__ = [
    "SpectralPoint",
    "AmplitudeFan",
    "exact_h3_kernel",
    "build_fan",
    "build_fans",
    "u0",
    "u1",
    "laplace_apply",
    "parametrix_kernel",
    "error_kernel",
]

FOUR_PI = 4.0 * np.pi


@dataclass(frozen=True)
class SpectralPoint:
    """Semiclassical spectral point: h in (0,1), sigma of order one.

    lambda_full = sigma/h is the non-semiclassical spectral parameter; the
    strip parameter Im sigma / h must be finite (it always is for h > 0).
    """

    h: float
    sigma: complex

    def __post_init__(self):
        if not 0.0 < self.h < 1.0:
            raise DomainError(f"h must be in (0,1), got {self.h}")
        if self.sigma == 0:
            raise DomainError("sigma must be nonzero")

    @property
    def lambda_full(self):
        return self.sigma / self.h

    @property
    def strip(self):
        """Im sigma / h, the weight-window parameter."""
        return self.sigma.imag / self.h


def exact_h3_kernel(sigma, r):
    """Exact hyperbolic-space resolvent kernel e^{-i sigma r} / (4 pi sinh r)."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise SingularInputError("exact kernel is singular on the diagonal (r = 0)")
    out = np.exp(-1j * sigma * r) / (FOUR_PI * np.sinh(r))
    return out if out.ndim else complex(out)


def _phase(sp, r):
    return np.exp(-1j * (sp.sigma / sp.h) * r)


def g_from_fields(fields, sp):
    """Parametrix kernel values from interpolated amplitude fields."""
    u1v = -fields["Q"] / (2j * sp.sigma)
    return _phase(sp, fields["r"]) * sp.h ** (-2) * (fields["U0"] + sp.h * u1v)


def e_from_fields(fields, sp):
    """Error kernel values h e^{-i(sigma/h)r} (Lap+x^2W-1)U1 from fields."""
    t = -fields["PQ"] / (2j * sp.sigma)
    return sp.h * _phase(sp, fields["r"]) * t


# ----------------------------------------------------------------------
# fan construction


def _orthonormal_basis(spec, zp):
    g = metric_matrix(spec, zp)
    l = np.linalg.cholesky(g)
    return np.linalg.inv(l).T  # columns E_k with E^T g E = I


def _fan_directions(basis, phi, psi):
    """Unit directions and their phi/psi derivatives for the product grid."""
    sphi, cphi = np.sin(phi)[:, None], np.cos(phi)[:, None]
    spsi, cpsi = np.sin(psi)[None, :], np.cos(psi)[None, :]
    comp = np.stack(
        [sphi * cpsi, sphi * spsi, np.broadcast_to(cphi, (phi.size, psi.size))], axis=-1
    )
    dphi = np.stack(
        [cphi * cpsi, cphi * spsi, np.broadcast_to(-sphi, (phi.size, psi.size))], axis=-1
    )
    dpsi = np.stack(
        [-sphi * spsi, sphi * cpsi, np.zeros((phi.size, psi.size))], axis=-1
    )
    theta = comp @ basis.T
    return theta, dphi @ basis.T, dpsi @ basis.T


def _variational_rhs_flat(spec, d):
    """RHS on flattened (M, 8d) states [z, v, Y1, Yd1, Y2, Yd2, F1, F2].

    Uses contracted Christoffel applications (closed-form conformal part
    plus collar-masked perturbation terms) so no rank-4 arrays are built.
    """

    def rhs(_, state):
        s = state.reshape(-1, 8 * d)
        z, v = s[:, :d], s[:, d : 2 * d]
        y1, yd1 = s[:, 2 * d : 3 * d], s[:, 3 * d : 4 * d]
        y2, yd2 = s[:, 4 * d : 5 * d], s[:, 5 * d : 6 * d]
        f1, f2 = s[:, 6 * d : 7 * d], s[:, 7 * d :]
        app = GammaApplicator(spec, z)
        acc = -app.gamma_apply(v, v)
        ydd1 = -app.dgamma_apply(y1, v, v) - 2.0 * app.gamma_apply(v, yd1)
        ydd2 = -app.dgamma_apply(y2, v, v) - 2.0 * app.gamma_apply(v, yd2)
        fd1 = -app.gamma_apply(v, f1)
        fd2 = -app.gamma_apply(v, f2)
        return np.concatenate([v, acc, yd1, ydd1, yd2, ydd2, fd1, fd2], axis=1).ravel()

    return rhs


def _two_by_two_inv(m):
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    inv = np.empty_like(m)
    inv[..., 0, 0] = m[..., 1, 1]
    inv[..., 1, 1] = m[..., 0, 0]
    inv[..., 0, 1] = -m[..., 0, 1]
    inv[..., 1, 0] = -m[..., 1, 0]
    return inv / det[..., None, None], det


def _pointwise_transport(spec, z, v, ys, yds, fs):
    """Radial transport data at ODE states: logdetM, L' and L'' of log det M.

    ys, yds, fs: lists of two (..., d) arrays (the two transverse variational
    fields, their velocities, and the parallel frames).  All covariant
    quantities are assembled pointwise from Christoffel data; nothing is
    differenced along the ray.
    """
    app = GammaApplicator(spec, z)
    a = -app.gamma_apply(v, v)

    m = np.empty(z.shape[:-1] + (2, 2))
    mdot = np.empty_like(m)
    mddot = np.empty_like(m)
    for ai, (y, yd) in enumerate(zip(ys, yds)):
        dy = yd + app.gamma_apply(v, y)
        ydd = -app.dgamma_apply(y, v, v) - 2.0 * app.gamma_apply(v, yd)
        d2y = (
            ydd
            + app.dgamma_apply(v, v, y)
            + app.gamma_apply(a, y)
            + app.gamma_apply(v, yd)
            + app.gamma_apply(v, dy)
        )
        for bi, f in enumerate(fs):
            m[..., ai, bi] = app.metric_dot(y, f)
            mdot[..., ai, bi] = app.metric_dot(dy, f)
            mddot[..., ai, bi] = app.metric_dot(d2y, f)
    minv, det = _two_by_two_inv(m)
    k1 = np.einsum("...ab,...bc->...ac", minv, mdot)
    l1 = np.einsum("...aa->...", k1)
    l2 = np.einsum("...ab,...ba->...", minv, mddot) - np.einsum("...ab,...ba->...", k1, k1)
    return det, l1, l2, m


def _unpack(states, d):
    z, v = states[..., :d], states[..., d : 2 * d]
    y1, yd1 = states[..., 2 * d : 3 * d], states[..., 3 * d : 4 * d]
    y2, yd2 = states[..., 4 * d : 5 * d], states[..., 5 * d : 6 * d]
    f1, f2 = states[..., 6 * d : 7 * d], states[..., 7 * d :]
    return z, v, (y1, y2), (yd1, yd2), (f1, f2)


@dataclass
class AmplitudeFan:
    """Geodesic polar amplitude grid around one base point.

    Stored fields are shaped (n_r, n_phi, n_psi); Cint is the transport
    integral int_0^r J^{1/2}(Lap+x^2W-1)U0 ds, PQS = (Lap+x^2W-1)Q * J^{3/2}
    (scaled for interpolation), corr = r - dist0 the metric distance
    correction; U1 = -(1/(2 i sigma)) * J^{-1/2} * Cint.
    """

    spec: MetricSpec
    zp: np.ndarray
    basis: np.ndarray
    basis_inv: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    r_nodes: np.ndarray
    logJ: np.ndarray
    Cint: np.ndarray
    PQS: np.ndarray
    corr: np.ndarray
    geometry: dict = field(default_factory=dict)

    # -- interpolation machinery ---------------------------------------

    def _angular_weights(self, phi_t, psi_t):
        n_phi, n_psi = self.phi.size, self.psi.size
        dphi = np.pi / n_phi
        dpsi = 2.0 * np.pi / n_psi
        p = phi_t / dphi - 0.5  # fractional row in [-1, n_phi]
        i0 = np.floor(p).astype(int)
        wp = p - i0
        q = np.mod(psi_t, 2.0 * np.pi) / dpsi
        j0 = np.floor(q).astype(int) % n_psi
        wq = q - np.floor(q)
        return i0, wp, j0, wq

    def _gather_row(self, fld, i, j):
        """Row i (with pole wrap) and psi-index j of a field."""
        n_phi, n_psi = self.phi.size, self.psi.size
        i_w = np.where(i < 0, -1 - i, np.where(i >= n_phi, 2 * n_phi - 1 - i, i))
        j_w = np.where((i < 0) | (i >= n_phi), (j + n_psi // 2) % n_psi, j)
        return fld[:, i_w, j_w]

    def _interp_angular(self, fld, i0, wp, j0, wq):
        n_psi = self.psi.size
        f00 = self._gather_row(fld, i0, j0)
        f01 = self._gather_row(fld, i0, (j0 + 1) % n_psi)
        f10 = self._gather_row(fld, i0 + 1, j0)
        f11 = self._gather_row(fld, i0 + 1, (j0 + 1) % n_psi)
        return (
            f00 * (1 - wp) * (1 - wq)
            + f01 * (1 - wp) * wq
            + f10 * wp * (1 - wq)
            + f11 * wp * wq
        )

    def _interp_radial(self, prof, r_t):
        """Cubic Lagrange interpolation in log r on the per-target profiles.

        prof has shape (n_r, M); r_t shape (M,).  Values below the first node
        are handled by the caller.
        """
        t_nodes = np.log(self.r_nodes)
        dt = t_nodes[1] - t_nodes[0]
        t = np.log(np.clip(r_t, self.r_nodes[0], self.r_nodes[-1]))
        p = (t - t_nodes[0]) / dt
        i0 = np.clip(np.floor(p).astype(int) - 1, 0, self.r_nodes.size - 4)
        s = p - i0  # in [~1, 2] for interior points
        cols = np.arange(r_t.size)
        vals = np.zeros(r_t.size, dtype=prof.dtype)
        for k in range(4):
            w = np.ones_like(s)
            for m in range(4):
                if m != k:
                    w *= (s - m) / (k - m)
            vals += w * prof[i0 + k, cols]
        return vals

    def _fields_at(self, r_t, i0, wp, j0, wq):
        prof_logj = self._interp_angular(self.logJ, i0, wp, j0, wq)
        prof_c = self._interp_angular(self.Cint, i0, wp, j0, wq)
        prof_pqs = self._interp_angular(self.PQS, i0, wp, j0, wq)
        below = r_t < self.r_nodes[0]
        r_clip = np.maximum(r_t, self.r_nodes[0])
        logj = self._interp_radial(prof_logj, r_clip)
        cval = self._interp_radial(prof_c, r_clip)
        pqs = self._interp_radial(prof_pqs, r_clip)
        if np.any(below):
            # J ~ r^2 and Cint ~ r near the vertex
            scale = r_t[below] / self.r_nodes[0]
            logj[below] += 2.0 * np.log(scale)
            cval[below] *= scale
        u0v = np.exp(-0.5 * logj) / FOUR_PI
        qv = np.exp(-0.5 * logj) * cval
        pqv = pqs * np.exp(-1.5 * logj)
        return logj, u0v, qv, pqv

    def polar_of_targets(self, targets):
        """Unperturbed polar coordinates (r0, phi, psi) of target points."""
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        r0 = np.atleast_1d(dist0_closed(self.zp, targets))
        w = log_map_ball(self.zp, targets)
        norm = np.linalg.norm(w, axis=-1, keepdims=True)
        if np.any(norm == 0.0):
            raise SingularInputError("target coincides with the fan base point")
        comp = (w / norm) @ self.basis_inv.T
        comp /= np.linalg.norm(comp, axis=-1, keepdims=True)
        phi_t = np.arccos(np.clip(comp[:, 2], -1.0, 1.0))
        psi_t = np.mod(np.arctan2(comp[:, 1], comp[:, 0]), 2.0 * np.pi)
        return r0, phi_t, psi_t

    def evaluate_pairs(self, targets):
        """Amplitude fields at kernel pairs (target, base).

        Returns dict with r (metric distance), U0, Q, PQ arrays; U1 and the
        kernels follow via g_from_fields / e_from_fields.
        """
        r0, phi_t, psi_t = self.polar_of_targets(targets)
        i0, wp, j0, wq = self._angular_weights(phi_t, psi_t)
        if self.spec.unperturbed:
            r_t = r0
        else:
            prof_corr = self._interp_angular(self.corr, i0, wp, j0, wq)
            r_t = r0 + self._interp_radial(prof_corr, np.maximum(r0, self.r_nodes[0]))
        if np.any(r_t > self.r_nodes[-1] * (1.0 + 1e-12)):
            raise DomainError(
                f"target distance {np.max(r_t):.3g} exceeds fan radius {self.r_nodes[-1]:.3g}"
            )
        logj, u0v, qv, pqv = self._fields_at(r_t, i0, wp, j0, wq)
        return {"r": r_t, "logJ": logj, "U0": u0v, "Q": qv, "PQ": pqv}

    def evaluate_polar(self, r, theta=None, phi=None, psi=None):
        """Fields at polar coordinates around the base (r scalar or array)."""
        if theta is not None:
            theta = np.asarray(theta, dtype=float)
            comp = self.basis_inv @ theta
            comp = comp / np.linalg.norm(comp)
            phi = np.arccos(np.clip(comp[2], -1.0, 1.0))
            psi = np.mod(np.arctan2(comp[1], comp[0]), 2.0 * np.pi)
        r = np.atleast_1d(np.asarray(r, dtype=float))
        phi_t = np.full(r.shape, float(phi))
        psi_t = np.full(r.shape, float(psi))
        i0, wp, j0, wq = self._angular_weights(phi_t, psi_t)
        logj, u0v, qv, pqv = self._fields_at(r, i0, wp, j0, wq)
        return {"r": r, "logJ": logj, "U0": u0v, "Q": qv, "PQ": pqv}

    def u1_grid(self, sigma):
        """U1 samples on the full fan grid for spectral parameter sigma."""
        if sigma == 0:
            raise DomainError("U1 carries a 1/sigma prefactor; sigma must be nonzero")
        return -np.exp(-0.5 * self.logJ) * self.Cint / (2j * sigma)

    @property
    def u0_grid(self):
        return np.exp(-0.5 * self.logJ) / FOUR_PI


def _angular_fd(fan_shape, psi_flip_rows):
    raise NotImplementedError


def _dphi(arr, dphi, odd=False):
    """Centered phi-derivative with pole wrap on (n_r, n_phi, n_psi) arrays."""
    n_psi = arr.shape[2]
    sign = -1.0 if odd else 1.0
    bottom = sign * np.roll(arr[:, :1, :], n_psi // 2, axis=2)
    top = sign * np.roll(arr[:, -1:, :], n_psi // 2, axis=2)
    ext = np.concatenate([bottom, arr, top], axis=1)
    return (ext[:, 2:, :] - ext[:, :-2, :]) / (2.0 * dphi)


def _dpsi(arr, dpsi):
    return (np.roll(arr, -1, axis=2) - np.roll(arr, 1, axis=2)) / (2.0 * dpsi)


def _angular_laplacian(hpp, hps, hss, sqrt_h, f, dphi, dpsi):
    """Laplace-Beltrami -(1/sqrtH) d_a (sqrtH H^{ab} d_b f) on the fan grid."""
    det = hpp * hss - hps * hps
    ipp, iss, ips = hss / det, hpp / det, -hps / det
    fp = _dphi(f, dphi)
    fs = _dpsi(f, dpsi)
    gp = sqrt_h * (ipp * fp + ips * fs)
    gs = sqrt_h * (ips * fp + iss * fs)
    div = _dphi(gp, dphi, odd=True) + _dpsi(gs, dpsi)
    return -div / sqrt_h


def build_fans(spec, bases, n_phi=8, n_psi=12, r_max=18.0, n_r=120, r_min=1e-3,
               rtol=1e-9, keep_geometry=False, chunk=40):
    """Amplitude fans around each base point, ODE-batched in chunks.

    r_max must keep all rays inside the guard shell: it is validated against
    log((1-|zp|)/1e-11) per base.  n_psi must be even (pole wrap).
    """
    bases = np.atleast_2d(np.asarray(bases, dtype=float))
    if n_psi % 2:
        raise DomainError("n_psi must be even")
    margins = np.log((1.0 - np.linalg.norm(bases, axis=1)) / 1e-11)
    if r_max >= np.min(margins):
        raise DomainError(
            f"r_max {r_max:.2f} too large for deepest base point "
            f"(admissible {np.min(margins):.2f})"
        )
    d = spec.dim
    if d != 3:
        raise DomainError("amplitude fans implement the three-dimensional construction")
    phi = (np.arange(n_phi) + 0.5) * np.pi / n_phi
    psi = np.arange(n_psi) * 2.0 * np.pi / n_psi
    r_nodes = np.geomspace(r_min, r_max, n_r)
    fans = []
    for start in range(0, bases.shape[0], chunk):
        zb = bases[start : start + chunk]
        fans.extend(
            _build_fan_chunk(spec, zb, phi, psi, r_nodes, rtol, keep_geometry)
        )
    return fans


def build_fan(spec, zp, **kw):
    """Single-base convenience wrapper around build_fans."""
    return build_fans(spec, np.asarray(zp, dtype=float)[None, :], **kw)[0]


def _build_fan_chunk(spec, bases, phi, psi, r_nodes, rtol, keep_geometry):
    d = spec.dim
    b_n = bases.shape[0]
    k = phi.size * psi.size
    states0 = np.empty((b_n, k, 8 * d))
    basis_list, basis_inv_list = [], []
    for b, zp in enumerate(bases):
        basis = _orthonormal_basis(spec, zp)
        basis_list.append(basis)
        basis_inv_list.append(np.linalg.inv(basis))
        theta, dth_phi, dth_psi = _fan_directions(basis, phi, psi)
        sphi = np.sin(phi)[:, None, None]
        f1 = dth_phi
        f2 = dth_psi / sphi
        zeros = np.zeros_like(theta)
        st = np.concatenate(
            [
                np.broadcast_to(zp, theta.shape),
                theta,
                zeros,
                dth_phi,
                zeros,
                dth_psi,
                f1,
                f2,
            ],
            axis=-1,
        )
        states0[b] = st.reshape(k, 8 * d)
    sol = solve_ivp(
        _variational_rhs_flat(spec, d),
        (0.0, float(r_nodes[-1])),
        states0.reshape(-1),
        method="DOP853",
        rtol=rtol,
        atol=rtol,
        t_eval=r_nodes,
        dense_output=False,
    )
    if not sol.success:
        raise ConjugatePointError(f"fan integration failed: {sol.message}")
    # states: (n_r, B, K, 8d)
    states = sol.y.T.reshape(r_nodes.size, b_n, k, 8 * d)
    fans = []
    for b, zp in enumerate(bases):
        fans.append(
            _postprocess_fan(
                spec,
                zp,
                basis_list[b],
                basis_inv_list[b],
                phi,
                psi,
                r_nodes,
                states[:, b],
                keep_geometry,
            )
        )
    return fans


def _postprocess_fan(spec, zp, basis, basis_inv, phi, psi, r_nodes, states, keep_geometry):
    n_r = r_nodes.size
    n_phi, n_psi = phi.size, psi.size
    d = spec.dim
    sinphi = np.sin(phi)[None, :, None]
    shape = (n_r, n_phi, n_psi)

    logj = np.empty(shape)
    l1 = np.empty(shape)
    rb = np.empty(shape)
    corr = np.empty(shape)
    hpp = np.empty(shape)
    hps = np.empty(shape)
    hss = np.empty(shape)
    xw = np.empty(shape)
    z_keep = np.empty(shape + (3,)) if keep_geometry else None

    slab = max(1, int(2e5 // (n_phi * n_psi)))
    for s0 in range(0, n_r, slab):
        s1 = min(s0 + slab, n_r)
        st = states[s0:s1].reshape(-1, 8 * d)
        z, v, ys, yds, fs = _unpack(st, d)
        det, li1, li2, m = _pointwise_transport(spec, z, v, ys, yds, fs)
        if np.any(det <= 0.0):
            raise ConjugatePointError(
                "volume density vanished inside the fan (conjugate point; delta too large?)"
            )
        blk = (s1 - s0, n_phi, n_psi)
        logj[s0:s1] = np.log(det).reshape(blk) - np.log(sinphi)
        l1[s0:s1] = li1.reshape(blk)
        xv = boundary_x(z)
        wv = spec.W(z)
        xw[s0:s1] = (xv**2 * wv).reshape(blk)
        rb[s0:s1] = (
            0.5 * li2.reshape(blk) + 0.25 * li1.reshape(blk) ** 2 - 1.0 + xw[s0:s1]
        ) / FOUR_PI
        corr[s0:s1] = r_nodes[s0:s1, None, None] - np.atleast_1d(
            dist0_closed(zp, z)
        ).reshape(blk)
        hmat = np.einsum("pab,pcb->pac", m, m)  # H_ab = (M M^T)_ab
        hpp[s0:s1] = hmat[:, 0, 0].reshape(blk)
        hps[s0:s1] = hmat[:, 0, 1].reshape(blk)
        hss[s0:s1] = hmat[:, 1, 1].reshape(blk)
        if keep_geometry:
            z_keep[s0:s1] = z.reshape(blk + (3,))

    dphi = np.pi / n_phi
    dpsi = 2.0 * np.pi / n_psi
    sqrt_h = np.exp(logj) * sinphi
    u0g = np.exp(-0.5 * logj) / FOUR_PI
    if spec.unperturbed:
        # angular derivatives of U0 vanish identically; skip the FD noise
        integrand = rb.copy()
    else:
        integrand = rb + np.exp(0.5 * logj) * _angular_laplacian(
            hpp, hps, hss, sqrt_h, u0g, dphi, dpsi
        )

    # transport integral C(r) = int_0^r I ds, with a quadratically
    # extrapolated r = 0 node so the first panel is integrated too
    r0w = np.concatenate([[0.0], r_nodes])
    i0 = _quad_extrapolate_zero(r_nodes[:3], integrand[:3])
    spline = CubicSpline(r0w, np.concatenate([i0[None], integrand], axis=0), axis=0)
    cint = spline.antiderivative()(r_nodes)
    iprime = spline(r_nodes, 1)

    qg = np.exp(-0.5 * logj) * cint
    if spec.unperturbed:
        pq = FOUR_PI * rb * qg - np.exp(-0.5 * logj) * iprime
    else:
        pq = (
            FOUR_PI * rb * qg
            + _angular_laplacian(hpp, hps, hss, sqrt_h, qg, dphi, dpsi)
            - np.exp(-0.5 * logj) * iprime
        )
    pqs = pq * np.exp(1.5 * logj)

    geometry = {}
    if keep_geometry:
        geometry = {
            "z": z_keep,
            "H_pp": hpp,
            "H_ps": hps,
            "H_ss": hss,
            "sin_phi": np.broadcast_to(sinphi, shape).copy(),
            "L1": l1,
            "x2W": xw,
            "U0": u0g,
            "Q": qg,
            "PQ": pq,
            "integrand": integrand,
        }
    return AmplitudeFan(
        spec=spec,
        zp=np.asarray(zp, dtype=float),
        basis=basis,
        basis_inv=basis_inv,
        phi=phi,
        psi=psi,
        r_nodes=r_nodes,
        logJ=logj,
        Cint=cint,
        PQS=pqs,
        corr=corr,
        geometry=geometry,
    )


def _quad_extrapolate_zero(r3, f3):
    """Quadratic extrapolation of the leading (n_r-axis) samples to r = 0."""
    v = np.vander(r3, 3, increasing=True)  # columns 1, r, r^2
    coef = np.linalg.solve(v, f3.reshape(3, -1))
    return coef[0].reshape(f3.shape[1:])


# ----------------------------------------------------------------------
# point operations


def u0(spec, zp, theta, r, rtol=1e-10):
    """Leading amplitude (1/4pi) J^{-1/2}(r, theta) along one ray."""
    j = jacobi_density(spec, zp, theta, r, rtol=rtol)
    return 1.0 / (FOUR_PI * np.sqrt(j))


def u1(spec, sigma, zp, theta, r, fan=None, rtol=1e-10):
    """First-order amplitude from the inhomogeneous transport equation.

    For unperturbed metrics the transport integrand reduces to
    x^2 W / (4 pi) along the closed-form geodesic and is integrated by
    adaptive quadrature to ~1e-12.  Perturbed metrics evaluate through an
    amplitude fan (built on demand when not supplied).
    """
    if sigma == 0:
        raise DomainError("sigma = 0: U1 carries a 1/sigma prefactor")
    zp = np.asarray(zp, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if spec.unperturbed:
        g = metric_matrix(spec, zp)
        theta_unit = theta / np.sqrt(theta @ g @ theta)
        u_hat = theta_unit / np.linalg.norm(theta_unit)
        if spec.W.is_zero:
            return 0.0 + 0.0j
        def integrand(s):
            pt = mobius_translate(zp, np.tanh(0.5 * s) * u_hat)
            return boundary_x(pt) ** 2 * float(spec.W(pt)) / FOUR_PI
        val, _ = quad(integrand, 0.0, r, epsabs=1e-14, epsrel=1e-11, limit=200)
        return -val / (2j * sigma * np.sinh(r))
    if fan is None:
        margin = np.log((1.0 - np.linalg.norm(zp)) / 1e-11)
        fan = build_fan(spec, zp, r_max=min(1.2 * r + 1.0, margin * 0.95))
    vals = fan.evaluate_polar(np.array([r]), theta=theta)
    return complex(-vals["Q"][0] / (2j * sigma))


def laplace_apply(fan, f, at):
    """Apply Lap_g = -d_r^2 - (d_r log J) d_r + Lap_H to fan samples at a node.

    f is an (n_r, n_phi, n_psi) array of samples; at = (i_r, i_phi, i_psi).
    The radial stencil is second-order centered on the nonuniform radial
    grid, the angular part uses the pullback angular metric assembled from
    the Jacobi matrices.  Needs keep_geometry=True at fan build time.
    """
    if not fan.geometry:
        raise StencilError("laplace_apply needs a fan built with keep_geometry=True")
    f = np.asarray(f)
    ir, ip, ipsi = at
    n_r = fan.r_nodes.size
    if not 0 < ir < n_r - 1:
        raise StencilError(f"radial index {ir} has no interior stencil (0 < i < {n_r - 1})")
    r = fan.r_nodes
    hm = r[ir] - r[ir - 1]
    hp = r[ir + 1] - r[ir]
    fm, f0, fp = f[ir - 1, ip, ipsi], f[ir, ip, ipsi], f[ir + 1, ip, ipsi]
    d1 = (fp * hm**2 - fm * hp**2 + f0 * (hp**2 - hm**2)) / (hm * hp * (hm + hp))
    d2 = 2.0 * (fm * hp + fp * hm - f0 * (hm + hp)) / (hm * hp * (hm + hp))
    geo = fan.geometry
    dphi = np.pi / fan.phi.size
    dpsi = 2.0 * np.pi / fan.psi.size
    sqrt_h = np.exp(fan.logJ) * geo["sin_phi"]
    lap_h = _angular_laplacian(
        geo["H_pp"], geo["H_ps"], geo["H_ss"], sqrt_h, f, dphi, dpsi
    )[ir, ip, ipsi]
    return -d2 - geo["L1"][ir, ip, ipsi] * d1 + lap_h


def parametrix_kernel(spec, sp, z, zp, fan=None):
    """Parametrix kernel G(h, sigma, z, z') at one point pair.

    With a fan around z' the amplitudes are interpolated; otherwise the
    distance is solved by shooting and the amplitudes integrated along the
    connecting ray (slow, oracle-grade for unperturbed specs).
    """
    z = np.asarray(z, dtype=float)
    zp = np.asarray(zp, dtype=float)
    if np.array_equal(z, zp):
        raise SingularInputError("parametrix kernel is singular on the diagonal")
    if fan is not None:
        fields = fan.evaluate_pairs(z[None, :])
        return complex(g_from_fields(fields, sp)[0])
    r, direction = distance_flow(spec, zp, z)
    u0v = u0(spec, zp, direction, r)
    u1v = u1(spec, sp.sigma, zp, direction, r)
    return complex(_phase(sp, r) * sp.h ** (-2) * (u0v + sp.h * u1v))


def error_kernel(spec, sp, z, zp, fan=None):
    """Error kernel E(h, sigma, z, z') = h e^{-i(sigma/h)r} (Lap+x^2W-1)U1."""
    z = np.asarray(z, dtype=float)
    zp = np.asarray(zp, dtype=float)
    if fan is None:
        margin = np.log((1.0 - np.linalg.norm(zp)) / 1e-11)
        r_need = float(dist0_closed(zp, z)) + 1.0
        fan = build_fan(spec, zp, r_max=min(r_need + 1.0, margin * 0.95))
    fields = fan.evaluate_pairs(z[None, :])
    return complex(e_from_fields(fields, sp)[0])


def transport_residuals(fan, sigma=1.0, r_window=(0.3, None)):
    """Independent finite-difference residuals of both transport equations.

    Returns (zeroth, first): max |d_r (J^{1/2} U0)| over the grid (an exact
    zero up to rounding, since J^{1/2} U0 = 1/4pi identically), and the
    pointwise residual of the first transport equation with d_r(J^{1/2}U1)
    re-computed by splines from the stored samples.  The first residual is
    discretization-limited and evaluated on the radial window r_window,
    away from the 1/r vertex singularity and the last spline panels.
    """
    from scipy.interpolate import make_interp_spline

    lo = r_window[0]
    hi = r_window[1] if r_window[1] is not None else fan.r_nodes[-2]
    sel = (fan.r_nodes >= lo) & (fan.r_nodes <= hi)
    sqrtj_u0 = np.exp(0.5 * fan.logJ) * fan.u0_grid  # = 1/4pi exactly
    flat0 = sqrtj_u0.reshape(fan.r_nodes.size, -1)
    d0 = make_interp_spline(fan.r_nodes, flat0, k=5)(fan.r_nodes, 1)
    zeroth = float(np.max(np.abs(d0[sel])))
    if not fan.geometry:
        return zeroth, np.nan
    u1g = fan.u1_grid(sigma)
    shape = u1g.shape
    sqrtj_u1 = (np.exp(0.5 * fan.logJ) * u1g).reshape(shape[0], -1)
    d1 = make_interp_spline(fan.r_nodes, sqrtj_u1, k=5)(fan.r_nodes, 1).reshape(shape)
    geo = fan.geometry
    dphi = np.pi / fan.phi.size
    dpsi = 2.0 * np.pi / fan.psi.size
    sqrt_h = np.exp(fan.logJ) * geo["sin_phi"]
    lap_ang = _angular_laplacian(
        geo["H_pp"], geo["H_ps"], geo["H_ss"], sqrt_h, geo["U0"], dphi, dpsi
    )
    u0s = make_interp_spline(fan.r_nodes, geo["U0"].reshape(shape[0], -1), k=5)
    lap_u0 = (-u0s(fan.r_nodes, 2) - geo["L1"].reshape(shape[0], -1) * u0s(fan.r_nodes, 1)).reshape(shape) + lap_ang
    resid = 2j * sigma * np.exp(-0.5 * fan.logJ) * d1 + (
        lap_u0 + (geo["x2W"] - 1.0) * geo["U0"]
    )
    first = float(np.max(np.abs(resid[sel])))
    return zeroth, first
