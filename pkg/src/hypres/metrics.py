"""Perturbed Poincare metrics g_delta = g0 + chi_delta * H and potentials.

g0 = 4|dz|^2/(1-|z|^2)^2 on the open unit ball B^(n+1); the perturbation H
is a symmetric 2-tensor smooth up to the closed ball, switched on only in
the collar 1-|z| < delta by chi((1-|z|)/delta), where chi is a fixed C^inf
profile with chi = 1 on |s| < 1/2 and chi = 0 on |s| > 1.

Christoffel symbols and their directional derivatives are assembled from
exact derivatives of the conformal part and of the cutoff profile; built-in
perturbation tensors carry analytic gradients and Hessians, tabulated ones
fall back to centered finite-difference stencils (step 1e-4).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import DomainError, ModelValidityError

__all__ = [
    "ScalarField",
    "TensorField",
    "MetricSpec",
    "chi_profile",
    "scalar_field",
    "tensor_field",
    "load_scalar_table",
    "load_tensor_table",
    "boundary_x",
    "metric_eval",
    "metric_matrix",
    "metric_energy",
    "christoffel",
    "christoffel_directional",
    "christoffel_bundle",
]

_FD_STEP = 1e-4


def _chi_of_t(t):
    """chi on the transition variable t in [0,1]: 1 at t=0, 0 at t=1, C^inf.

    chi = 1/(1+e^{g}), g = 1/(1-t) - 1/t; returns (chi, dchi/dt, d2chi/dt2).
    """
    t = np.asarray(t, dtype=float)
    tt = np.clip(t, 1e-9, 1.0 - 1e-9)
    g = 1.0 / (1.0 - tt) - 1.0 / tt
    # where |g| > 60 the true chi is within 1e-26 of its plateau; treating the
    # tails as exactly flat avoids spurious derivative spikes from clipping
    flat = (t <= 0.0) | (t >= 1.0) | (np.abs(g) > 60.0)
    eg = np.exp(np.clip(g, -60.0, 60.0))
    chi = 1.0 / (1.0 + eg)
    gp = 1.0 / (1.0 - tt) ** 2 + 1.0 / tt**2
    gpp = 2.0 / (1.0 - tt) ** 3 - 2.0 / tt**3
    d1 = -chi * (1.0 - chi) * gp
    d2 = -d1 * (1.0 - 2.0 * chi) * gp - chi * (1.0 - chi) * gpp
    chi = np.where(flat, np.where(g < 0.0, 1.0, 0.0), chi)
    chi = np.where(t <= 0.0, 1.0, np.where(t >= 1.0, 0.0, chi))
    d1 = np.where(flat, 0.0, d1)
    d2 = np.where(flat, 0.0, d2)
    return chi, d1, d2


def chi_profile(s):
    """Smooth cutoff profile: 1 for |s| <= 1/2, 0 for |s| >= 1, C^inf in between."""
    s = np.abs(np.asarray(s, dtype=float))
    chi, _, _ = _chi_of_t(2.0 * (s - 0.5))
    return chi


class ScalarField:
    """Named scalar field on the closed ball, callable on (..., dim) arrays."""

    def __init__(self, name, fn, is_zero=False):
        self.name = name
        self._fn = fn
        self.is_zero = is_zero

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.is_zero:
            return np.zeros(z.shape[:-1])
        return self._fn(z)

    def __repr__(self):
        return f"ScalarField({self.name!r})"


class TensorField:
    """Named symmetric 2-tensor on the closed ball.

    value(z) -> (..., d, d); when grad/hess are provided they return
    d_m H_ij as (..., m, i, j) and d_m d_l H_ij as (..., m, l, i, j),
    otherwise centered stencils are used.
    """

    def __init__(self, name, fn, grad=None, hess=None, is_zero=False):
        self.name = name
        self._fn = fn
        self._grad = grad
        self._hess = hess
        self.is_zero = is_zero

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.is_zero:
            d = z.shape[-1]
            return np.zeros(z.shape[:-1] + (d, d))
        return self._fn(z)

    def grad(self, z):
        if self._grad is not None:
            return self._grad(z)
        return _fd_grad(self, z)

    def hess(self, z):
        if self._hess is not None:
            return self._hess(z)
        return _fd_hess(self, z)

    def __repr__(self):
        return f"TensorField({self.name!r})"


def _fd_grad(fld, z):
    d = z.shape[-1]
    out = np.empty(z.shape[:-1] + (d, d, d))
    for m in range(d):
        e = np.zeros(d)
        e[m] = _FD_STEP
        out[..., m, :, :] = (fld(z + e) - fld(z - e)) / (2.0 * _FD_STEP)
    return out


def _fd_hess(fld, z):
    d = z.shape[-1]
    h = _FD_STEP
    out = np.empty(z.shape[:-1] + (d, d, d, d))
    f0 = fld(z)
    for m in range(d):
        em = np.zeros(d)
        em[m] = h
        out[..., m, m, :, :] = (fld(z + em) - 2.0 * f0 + fld(z - em)) / h**2
        for l in range(m + 1, d):
            el = np.zeros(d)
            el[l] = h
            mixed = (fld(z + em + el) + fld(z - em - el) - fld(z + em - el) - fld(z - em + el)) / (
                4.0 * h**2
            )
            out[..., m, l, :, :] = mixed
            out[..., l, m, :, :] = mixed
    return out


def scalar_field(name, **params):
    """Built-in scalar potentials W.

    zero; constant(value); gaussian(amp, width, center); round_bump(amp)
    = amp*exp(-|z|^2).  All entire in z, hence smooth up to the closed ball.
    """
    if name == "zero":
        return ScalarField("zero", None, is_zero=True)
    if name == "constant":
        value = float(params.get("value", 1.0))
        return ScalarField(f"constant({value})", lambda z: np.full(z.shape[:-1], value))
    if name == "gaussian":
        amp = float(params.get("amp", 1.0))
        width = float(params.get("width", 0.6))
        center = params.get("center", None)

        def fn(z):
            if center is None:
                q = np.sum(z * z, axis=-1)
            else:
                c = np.asarray(center, dtype=float)
                q = np.sum((z - c) ** 2, axis=-1)
            return amp * np.exp(-q / width**2)

        return ScalarField(f"gaussian(amp={amp},width={width})", fn)
    if name == "round_bump":
        amp = float(params.get("amp", 1.0))
        return ScalarField(f"round_bump(amp={amp})", lambda z: amp * np.exp(-np.sum(z * z, axis=-1)))
    raise DomainError(f"unknown scalar field name {name!r}")


def _gauss_poly_tensor(name, amp, center, width, iso, rad):
    """amp * exp(-|z-c|^2/width^2) * (iso*I + rad*z z^T), with derivatives."""

    def pieces(z):
        d = z.shape[-1]
        c = np.zeros(d) if center is None else np.asarray(center, dtype=float)[:d]
        u = z - c
        w = amp * np.exp(-np.sum(u * u, axis=-1) / width**2)
        dw = w[..., None] * (-2.0 / width**2) * u
        ddw = (
            w[..., None, None]
            * (4.0 / width**4 * u[..., :, None] * u[..., None, :] - (2.0 / width**2) * np.eye(d))
        )
        eye = np.eye(d)
        s = iso * eye + rad * z[..., :, None] * z[..., None, :]
        return w, dw, ddw, s

    def fn(z):
        w, _, _, s = pieces(z)
        return w[..., None, None] * s

    def grad(z):
        d = z.shape[-1]
        w, dw, _, s = pieces(z)
        eye = np.eye(d)
        ds = rad * (
            np.einsum("mi,...j->...mij", eye, z) + np.einsum("mj,...i->...mij", eye, z)
        )
        return np.einsum("...m,...ij->...mij", dw, s) + w[..., None, None, None] * ds

    def hess(z):
        d = z.shape[-1]
        w, dw, ddw, s = pieces(z)
        eye = np.eye(d)
        ds = rad * (
            np.einsum("mi,...j->...mij", eye, z) + np.einsum("mj,...i->...mij", eye, z)
        )
        dds = rad * (
            np.einsum("mi,lj->mlij", eye, eye) + np.einsum("mj,li->mlij", eye, eye)
        )
        out = ddw[..., :, :, None, None] * s[..., None, None, :, :]
        out += dw[..., :, None, None, None] * ds[..., None, :, :, :]
        out += dw[..., None, :, None, None] * ds[..., :, None, :, :]
        out += w[..., None, None, None, None] * dds
        return out

    return TensorField(name, fn, grad=grad, hess=hess)


def tensor_field(name, **params):
    """Built-in perturbation tensors H.

    zero; round_bump(amp, iso, rad) = amp*exp(-|z|^2)(iso*I + rad*z z^T),
    rotationally symmetric; off_bump(amp, center, width) = the same family
    centered off the origin (breaks rotational symmetry).
    """
    if name == "zero":
        return TensorField("zero", None, is_zero=True)
    if name == "round_bump":
        amp = float(params.get("amp", 1.0))
        iso = float(params.get("iso", 1.0))
        rad = float(params.get("rad", 0.5))
        return _gauss_poly_tensor(
            f"round_bump(amp={amp},iso={iso},rad={rad})", amp, None, 1.0, iso, rad
        )
    if name == "off_bump":
        amp = float(params.get("amp", 1.0))
        center = params.get("center", (0.3, 0.0, 0.0))
        width = float(params.get("width", 0.7))
        return _gauss_poly_tensor(f"off_bump(amp={amp})", amp, center, width, 1.0, 1.0)
    raise DomainError(f"unknown tensor field name {name!r}")


def _read_table_header(path):
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                parts = line.split()
                dim = int(parts[0])
                shape = tuple(int(p) for p in parts[1 : 1 + dim])
                ncomp = int(parts[1 + dim])
                return dim, shape, ncomp
    raise DomainError(f"{path}: missing header line 'dim n1 ... nd ncomp'")


def _read_table(path):
    dim, shape, ncomp = _read_table_header(path)
    rows = []
    header_seen = False
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                header_seen = True  # first data-like line is the header
                continue
            rows.append([float(v) for v in line.split()])
    values = np.asarray(rows, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape != (int(np.prod(shape)), ncomp):
        raise DomainError(
            f"{path}: expected {int(np.prod(shape))} rows of {ncomp} values, got {values.shape}"
        )
    if not np.all(np.isfinite(values)):
        raise DomainError(f"{path}: non-finite table entries")
    axes = [np.linspace(-1.0, 1.0, m) for m in shape]
    grids = values.reshape(shape + (ncomp,))
    return dim, axes, grids


def load_scalar_table(path):
    """Tabulated potential: header 'dim n1 ... nd 1', rows of samples on [-1,1]^dim."""
    dim, axes, grids = _read_table(path)
    interp = RegularGridInterpolator(axes, grids[..., 0], method="cubic")

    def fn(z):
        return interp(z.reshape(-1, dim)).reshape(z.shape[:-1])

    return ScalarField(f"table({path})", fn)


def load_tensor_table(path):
    """Tabulated symmetric 2-tensor, ncomp = dim(dim+1)/2 upper-triangle columns.

    Storing only the upper triangle keeps the interpolant exactly symmetric.
    """
    dim, axes, grids = _read_table(path)
    ncomp = grids.shape[-1]
    if ncomp != dim * (dim + 1) // 2:
        raise DomainError(f"tensor table needs {dim*(dim+1)//2} components, got {ncomp}")
    interp = RegularGridInterpolator(axes, grids, method="cubic")
    iu = np.triu_indices(dim)

    def fn(z):
        flat = interp(z.reshape(-1, dim))
        out = np.zeros((flat.shape[0], dim, dim))
        out[:, iu[0], iu[1]] = flat
        out = out + np.swapaxes(out, -1, -2)
        out[:, np.arange(dim), np.arange(dim)] *= 0.5
        return out.reshape(z.shape[:-1] + (dim, dim))

    return TensorField(f"table({path})", fn)


@dataclass(frozen=True)
class MetricSpec:
    """Parameters of g_delta = g0 + chi((1-|z|)/delta) H and the potential W.

    n is the boundary dimension (the ball is n+1 dimensional); delta >= 0 is
    the collar width, delta = 0 meaning no perturbation at all.
    """

    n: int = 2
    delta: float = 0.0
    H: TensorField = field(default_factory=lambda: tensor_field("zero"))
    W: ScalarField = field(default_factory=lambda: scalar_field("zero"))

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("boundary dimension n must be >= 1")
        if self.delta < 0:
            raise DomainError("delta must be >= 0")

    @property
    def dim(self):
        return self.n + 1

    @property
    def unperturbed(self):
        return self.delta == 0.0 or self.H.is_zero

    def chi_delta(self, z):
        z = np.asarray(z, dtype=float)
        if self.delta == 0.0:
            return np.zeros(z.shape[:-1])
        s = (1.0 - np.linalg.norm(z, axis=-1)) / self.delta
        return chi_profile(s)


def boundary_x(z):
    """The weight coordinate x = (1-|z|)/(1+|z|)."""
    r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
    return (1.0 - r) / (1.0 + r)


def _conformal_factor(z):
    r2 = np.sum(z * z, axis=-1)
    return 2.0 / (1.0 - r2)


def metric_matrix(spec, z):
    """g_delta(z) as a (..., dim, dim) array, no SPD validation."""
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    phi = _conformal_factor(z)
    g = (phi**2)[..., None, None] * np.eye(d)
    if not spec.unperturbed:
        chi = spec.chi_delta(z)
        if np.any(chi > 0.0):
            g = g + chi[..., None, None] * spec.H(z)
    return g


def metric_eval(spec, z):
    """g_delta(z), validated symmetric positive definite.

    Raises ModelValidityError when the perturbation destroys positivity
    (too large for the collar), DomainError off the open ball.
    """
    z = np.asarray(z, dtype=float)
    r2 = np.sum(z * z, axis=-1)
    if np.any(r2 >= 1.0):
        raise DomainError("metric_eval requires strictly interior points")
    g = metric_matrix(spec, z)
    eigs = np.linalg.eigvalsh(g)
    if np.any(eigs <= 0.0):
        raise ModelValidityError(
            f"g_delta not positive definite (min eigenvalue {np.min(eigs):.3e}); "
            "perturbation too large"
        )
    return g


def metric_energy(spec, z, v):
    """g_delta(v, v) batched: z, v of shape (..., dim)."""
    g = metric_matrix(spec, z)
    return np.einsum("...ij,...i,...j->...", g, v, v)


def _chi_delta_derivs(spec, z):
    """chi_delta and its spatial gradient/Hessian (zero wherever chi is flat)."""
    d = z.shape[-1]
    rho = np.linalg.norm(z, axis=-1)
    rho_safe = np.maximum(rho, 1e-12)
    s = (1.0 - rho) / spec.delta
    t = 2.0 * (np.abs(s) - 0.5)
    chi, c1, c2 = _chi_of_t(t)
    # t as a function of z (s > 0 in the collar): dt/dz = -2 z/(rho delta)
    dt = (-2.0 / spec.delta) * z / rho_safe[..., None]
    eye = np.eye(d)
    hess_rho = eye / rho_safe[..., None, None] - np.einsum(
        "...i,...j->...ij", z, z
    ) / (rho_safe**3)[..., None, None]
    ddt = (-2.0 / spec.delta) * hess_rho
    grad = c1[..., None] * dt
    hess = c2[..., None, None] * np.einsum("...i,...j->...ij", dt, dt) + c1[..., None, None] * ddt
    return chi, grad, hess


def _geometry(spec, z, order=1):
    """(g, ginv, dg[, d2g]) with dg[...,m,i,j] = d_m g_ij, d2g[...,m,l,i,j].

    Conformal part exact; perturbation part from the field's analytic
    derivatives (or its FD stencils) and the exact cutoff-profile chain rule.
    """
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    phi = _conformal_factor(z)
    eye = np.eye(d)
    g = (phi**2)[..., None, None] * eye
    grad_phi2 = 2.0 * (phi**3)[..., None] * z
    dg = grad_phi2[..., :, None, None] * eye
    d2g = None
    if order >= 2:
        # d_l d_m phi^2 = 6 phi^4 z_l z_m + 2 phi^3 delta_lm
        dd = 6.0 * (phi**4)[..., None, None] * np.einsum("...l,...m->...lm", z, z) + 2.0 * (
            phi**3
        )[..., None, None] * eye
        d2g = np.einsum("...ml,ij->...mlij", dd, eye)

    if not spec.unperturbed:
        rho = np.linalg.norm(z, axis=-1)
        active = 1.0 - rho < spec.delta
        if np.any(active):
            za = z[active]
            chi, dchi, ddchi = _chi_delta_derivs(spec, za)
            hval = spec.H(za)
            hgrad = spec.H.grad(za)
            g[active] += chi[..., None, None] * hval
            dg[active] += dchi[..., :, None, None] * hval[..., None, :, :] + chi[
                ..., None, None, None
            ] * hgrad
            if order >= 2:
                hhess = spec.H.hess(za)
                term = ddchi[..., :, :, None, None] * hval[..., None, None, :, :]
                term += dchi[..., :, None, None, None] * hgrad[..., None, :, :, :]
                term += dchi[..., None, :, None, None] * hgrad[..., :, None, :, :]
                term += chi[..., None, None, None, None] * hhess
                d2g[active] += term
    ginv = np.linalg.inv(g)
    return (g, ginv, dg) if order < 2 else (g, ginv, dg, d2g)


def christoffel(spec, z):
    """Christoffel symbols Gamma^k_ij of g_delta, batched over leading axes."""
    g, ginv, dg = _geometry(spec, np.asarray(z, dtype=float), order=1)
    bracket = np.einsum("...ilj->...lij", dg) + np.einsum("...jli->...lij", dg) - dg
    return 0.5 * np.einsum("...kl,...lij->...kij", ginv, bracket)


def christoffel_bundle(spec, z, dirs=()):
    """Gamma plus its directional derivatives along each vector in dirs.

    Shares one geometry evaluation; dirs is a sequence of (..., dim) arrays.
    Returns (gamma, [dgamma_along_dir, ...]).
    """
    z = np.asarray(z, dtype=float)
    order = 2 if dirs else 1
    geo = _geometry(spec, z, order=order)
    g, ginv, dg = geo[0], geo[1], geo[2]
    bracket = np.einsum("...ilj->...lij", dg) + np.einsum("...jli->...lij", dg) - dg
    gamma = 0.5 * np.einsum("...kl,...lij->...kij", ginv, bracket)
    outs = []
    if dirs:
        d2g = geo[3]
        for y in dirs:
            y = np.asarray(y, dtype=float)
            dgy = np.einsum("...mlij,...m->...lij", d2g, y)  # d_Y(d_l g_ij)
            dbr = (
                np.einsum("...ilj->...lij", dgy)
                + np.einsum("...jli->...lij", dgy)
                - dgy
            )
            dginv = -np.einsum("...ka,...mab,...m,...bl->...kl", ginv, dg, y, ginv)
            outs.append(
                0.5 * np.einsum("...kl,...lij->...kij", dginv, bracket)
                + 0.5 * np.einsum("...kl,...lij->...kij", ginv, dbr)
            )
    return gamma, outs


def christoffel_directional(spec, z, y):
    """Directional derivative (d_m Gamma^k_ij) y^m."""
    return christoffel_bundle(spec, z, dirs=(y,))[1][0]


# ----------------------------------------------------------------------
# fast contracted applications (closed forms for the conformal part)
#
# For g0 = phi^2 |dz|^2 the symbols are Gamma^k_ij = d^k_i w_j + d^k_j w_i
# - d_ij w^k with w = grad log phi = phi z, and their derivative along Y
# has the same form with w replaced by dw(Y) = phi Y + phi^2 (z.Y) z.
# Contracting analytically avoids ever materializing (B,3,3,3) arrays.


def _dot(a, b):
    return np.sum(a * b, axis=-1, keepdims=True)


def _gamma_apply_from_w(w, u, s):
    """(Gamma(u, s))^k for conformal-form symbols built from the vector w."""
    return u * _dot(w, s) + s * _dot(w, u) - w * _dot(u, s)


class GammaApplicator:
    """Batched contracted Christoffel data at a fixed set of points.

    gamma_uv(u, s) = Gamma^k_ij u^i s^j and dgamma(y, u, s) =
    (d_m Gamma^k_ij) y^m u^i s^j, combining the closed-form conformal part
    with the perturbation tensors on collar-active points only.
    """

    def __init__(self, spec, z):
        z = np.asarray(z, dtype=float)
        self.z = z
        phi = _conformal_factor(z)
        self.phi = phi
        self.w = phi[..., None] * z
        self.active = None
        if not spec.unperturbed:
            rho = np.linalg.norm(z, axis=-1)
            active = 1.0 - rho < spec.delta
            if np.any(active):
                self.active = active
                za = z[active]
                g, ginv, dg, d2g = _geometry(spec, za, order=2)
                phi_a = _conformal_factor(za)
                self._gp = g - (phi_a**2)[..., None, None] * np.eye(z.shape[-1])
                bracket = (
                    np.einsum("...ilj->...lij", dg)
                    + np.einsum("...jli->...lij", dg)
                    - dg
                )
                self._bracket = bracket
                gamma_full = 0.5 * np.einsum("...kl,...lij->...kij", ginv, bracket)
                w_a = phi_a[..., None] * za
                eye = np.eye(z.shape[-1])
                gamma0 = (
                    eye[..., :, :, None] * w_a[..., None, None, :]
                    + eye[..., :, None, :] * w_a[..., None, :, None]
                    - eye[..., None, :, :] * w_a[..., :, None, None]
                )
                self._gamma_pert = gamma_full - gamma0
                # full directional Christoffel derivative minus its conformal
                # closed form, stored contracted as (B, m, k, i, j)
                dbr = (
                    np.einsum("...milj->...mlij", d2g)
                    + np.einsum("...mjli->...mlij", d2g)
                    - d2g
                )
                dginv_m = -(ginv[..., None, :, :] @ dg @ ginv[..., None, :, :])
                dgam = 0.5 * np.einsum("...mkl,...lij->...mkij", dginv_m, bracket)
                dgam += 0.5 * np.einsum("...kl,...mlij->...mkij", ginv, dbr)
                # conformal part: dw along each coordinate direction e_m
                dw_m = phi_a[..., None, None] * np.eye(3) + (phi_a**2)[
                    ..., None, None
                ] * np.einsum("...m,...k->...mk", za, za)
                dgam0 = (
                    np.einsum("ki,...mj->...mkij", eye, dw_m)
                    + np.einsum("kj,...mi->...mkij", eye, dw_m)
                    - np.einsum("ij,...mk->...mkij", eye, dw_m)
                )
                self._dgamma_pert = dgam - dgam0

    def gamma_apply(self, u, s):
        out = _gamma_apply_from_w(self.w, u, s)
        if self.active is not None:
            ua, sa = u[self.active], s[self.active]
            out[self.active] += np.einsum("...kij,...i,...j->...k", self._gamma_pert, ua, sa)
        return out

    def metric_dot(self, u, s):
        """g_delta(u, s) at the stored points."""
        out = (self.phi**2) * np.sum(u * s, axis=-1)
        if self.active is not None:
            out[self.active] += np.einsum(
                "...ij,...i,...j->...", self._gp, u[self.active], s[self.active]
            )
        return out

    def dgamma_apply(self, y, u, s):
        dwy = self.phi[..., None] * y + (self.phi**2 * np.sum(self.z * y, axis=-1))[
            ..., None
        ] * self.z
        out = _gamma_apply_from_w(dwy, u, s)
        if self.active is not None:
            ya, ua, sa = y[self.active], u[self.active], s[self.active]
            out[self.active] += np.einsum(
                "...mkij,...m,...i,...j->...k", self._dgamma_pert, ya, ua, sa
            )
        return out

    def dgamma_apply_pair(self, ys, u, s):
        """dgamma_apply for several directions y with one (u, s) contraction."""
        us = None
        if self.active is not None:
            us = np.einsum(
                "...mkij,...i,...j->...mk", self._dgamma_pert, u[self.active], s[self.active]
            )
        outs = []
        for y in ys:
            dwy = self.phi[..., None] * y + (
                self.phi**2 * np.sum(self.z * y, axis=-1)
            )[..., None] * self.z
            out = _gamma_apply_from_w(dwy, u, s)
            if us is not None:
                out[self.active] += np.einsum("...mk,...m->...k", us, y[self.active])
            outs.append(out)
        return outs
