"""Per-mode radial resolvent of the de Sitter-Schwarzschild twisted Laplacian.

In the tortoise coordinate r_* (dr_*/dr = alpha^{-2}) the ell-th spherical
harmonic mode of Delta_X, conjugated by w = r^{n/2} u, becomes

    -w'' + V_ell(r_*) w = sigma^2 w,
    V_ell = alpha^2 [ ell(ell+n-1)/r^2 + n beta / r + n(n-2) alpha^2/(4 r^2) ],

with V decaying like e^{2 beta_H r_*} (r_* -> -inf) and e^{-2|beta_I| r_*}.
The map w = r^{n/2} u is unitary from L^2(X; Omega) onto L^2(dr_*), so all
mode operator norms are computed in the w-representation.

Outgoing Jost solutions are fixed by w_H ~ e^{+i sigma r_*} at the black
hole end and w_I ~ e^{-i sigma r_*} at the cosmological end; with these the
Green kernel w_H(min) w_I(max)/W(sigma) is the resolvent on the physical
half-plane Im sigma < 0 and continues analytically upward in the strip
|Im sigma| < min(beta_H, |beta_I|).  Resonances (quasinormal modes) are the
zeros of the Wronskian W = w_H' w_I - w_H w_I' in the upper half-plane; for
the free equation W = 2 i sigma.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .desitter import DSSModel, alpha2_from_ends, psi_log_weight, tilde_alpha
from .errors import AccuracyError, DomainError, NearResonanceWarning, TruncationError, WeightWindowError
from .schur import KernelGrid

__all__ = [
    "TortoiseGrid",
    "ModeResolventScan",
    "tortoise",
    "outgoing_solution",
    "wronskian",
    "qnm_scan",
    "mode_green",
    "green_norm",
    "norm_scan",
]


def _rstar_coeffs(model):
    """Partial-fraction residues of alpha^{-2} at (r_H, r_I, r3)."""
    a = 1.0 / (2.0 * model.beta_H)
    b = 1.0 / (2.0 * abs(model.beta_I))
    from .desitter import beta_at

    c = 1.0 / (2.0 * beta_at(model, model.r3))
    return a, b, c


def _rstar_of_r(model, r, u_h=None, u_i=None):
    """Closed-form tortoise map r_*(r), anchored r_*((r_H+r_I)/2) = 0."""
    a, b, c = _rstar_coeffs(model)
    r = np.asarray(r, dtype=float)
    uh = r - model.r_H if u_h is None else np.asarray(u_h, dtype=float)
    ui = model.r_I - r if u_i is None else np.asarray(u_i, dtype=float)
    mid = 0.5 * (model.r_H + model.r_I)
    half = 0.5 * model.width
    base = a * np.log(half) - b * np.log(half) + c * np.log(mid - model.r3)
    return a * np.log(uh) - b * np.log(ui) + c * np.log(r - model.r3) - base


def _r_of_rstar(model, rstar):
    """Invert the tortoise map; returns (r, u_H, u_I) with stable end values.

    Near the ends the iteration solves for the small distance to the
    horizon directly, so u_H, u_I stay accurate far below machine epsilon
    relative to r itself.
    """
    a, b, c = _rstar_coeffs(model)
    rstar = np.asarray(rstar, dtype=float)
    mid = 0.5 * (model.r_H + model.r_I)
    half = 0.5 * model.width
    base = a * np.log(half) - b * np.log(half) + c * np.log(mid - model.r3)
    r = np.full(rstar.shape, mid)
    # Newton in r for the bulk
    for _ in range(100):
        f = _rstar_of_r(model, r) - rstar
        step = f * alpha2_from_ends(model, u_h=r - model.r_H)
        r_new = np.clip(
            r - step, model.r_H + 1e-14 * model.width, model.r_I - 1e-14 * model.width
        )
        moved = np.max(np.abs(r_new - r))
        r = r_new
        if moved < 1e-15 * model.width:
            break
    u_h = r - model.r_H
    u_i = model.r_I - r
    # end refinements: fixed-point in log u, immune to cancellation in r
    left = rstar < _rstar_of_r(model, np.array(model.r_H + 0.05 * model.width))
    if np.any(left):
        u = u_h[left]
        for _ in range(60):
            rr = model.r_H + u
            u = np.exp(
                (rstar[left] + base + b * np.log(model.r_I - rr) - c * np.log(rr - model.r3)) / a
            )
        u_h[left] = u
        r[left] = model.r_H + u
        u_i[left] = model.width - u
    right = rstar > _rstar_of_r(model, np.array(model.r_I - 0.05 * model.width))
    if np.any(right):
        u = u_i[right]
        for _ in range(60):
            rr = model.r_I - u
            u = np.exp(
                -(rstar[right] + base - a * np.log(rr - model.r_H) - c * np.log(rr - model.r3)) / b
            )
        u_i[right] = u
        r[right] = model.r_I - u
        u_h[right] = model.width - u
    return r, u_h, u_i


def _potential(model, ell, r, u_h, u_i):
    n = model.n
    lam = ell * (ell + n - 1)
    a2 = alpha2_from_ends(model, u_h=u_h)
    from .desitter import beta_at

    beta = beta_at(model, r)
    return a2 * (lam / r**2 + n * beta / r + n * (n - 2) * a2 / (4.0 * r**2))


class _FastU:
    """Scalar-fast cubic evaluator of log u_H (or log u_I) vs r_star.

    Uniform-knot piecewise cubic built from the exact inversion; evaluation
    is plain float arithmetic so ODE right-hand sides stay cheap.
    """

    def __init__(self, t0, dt, coeffs):
        self.t0 = t0
        self.dt = dt
        self.c = coeffs  # (4, n_intervals)
        self.n = coeffs.shape[1]

    def __call__(self, t):
        p = (t - self.t0) / self.dt
        i = int(p)
        if i < 0:
            i = 0
        elif i >= self.n:
            i = self.n - 1
        x = (p - i) * self.dt
        c = self.c
        return ((c[0, i] * x + c[1, i]) * x + c[2, i]) * x + c[3, i]


@dataclass
class TortoiseGrid:
    """Uniform tortoise grid with companion radii and potential samples."""

    model: DSSModel
    ell: int
    L: float
    r_star: np.ndarray
    r: np.ndarray
    u_H: np.ndarray
    u_I: np.ndarray
    V: np.ndarray
    tail: tuple
    _fast_uh: _FastU = None
    _fast_ui: _FastU = None

    @property
    def h(self):
        return self.r_star[1] - self.r_star[0]

    def potential_at(self, rstar):
        """Exact potential at arbitrary tortoise points (closed-form map)."""
        rstar = np.atleast_1d(np.asarray(rstar, dtype=float))
        r, u_h, u_i = _r_of_rstar(self.model, rstar)
        return _potential(self.model, self.ell, r, u_h, u_i)

    def potential_scalar(self):
        """Fast scalar V(r_star) closure for ODE right-hand sides.

        Uses the precomputed log u splines (relative accuracy ~1e-9); falls
        back to the exact map when the grid was built without them.
        """
        if self._fast_uh is None:
            exact = self.potential_at
            return lambda t: float(exact(np.array([t]))[0])
        model = self.model
        ell = self.ell
        n = model.n
        lam = float(ell * (ell + n - 1))
        r_h, r_i, r3 = model.r_H, model.r_I, model.r3
        w = model.width
        c_lam = model.Lambda / 3.0
        m_mass = model.m
        fh, fi = self._fast_uh, self._fast_ui
        from math import exp

        def v_of(t):
            if t <= 0.0:
                u = exp(fh(t))
                r = r_h + u
                a2 = (c_lam / r) * u * (w - u) * (r - r3)
            else:
                u = exp(fi(t))
                r = r_i - u
                a2 = (c_lam / r) * (w - u) * u * (r - r3)
            beta = m_mass / (r * r) - c_lam * r
            return a2 * (lam / (r * r) + n * beta / r + n * (n - 2) * a2 / (4.0 * r * r))

        return v_of


def default_truncation(model, tol=1e-12):
    """L with e^{-2 min(beta_H, |beta_I|) L} < tol."""
    rate = 2.0 * min(model.beta_H, abs(model.beta_I))
    return float(np.ceil(-np.log(tol) / rate))


def tortoise(model, ell, L=None, n_grid=None, tail_tol=1e-10):
    """Build the tortoise grid for the ell-th mode.

    The map r(r_*) is evaluated from the closed-form partial-fraction
    integral of alpha^{-2} (Newton/fixed-point inverted), which keeps the
    horizon distances u_H, u_I exact to relative rounding at any depth.
    Raises TruncationError if |V(+-L)| exceeds tail_tol.
    """
    if ell < 0:
        raise DomainError("ell must be >= 0")
    if L is None:
        L = default_truncation(model)
    if n_grid is None:
        n_grid = int(max(4000, 40 * L))
    r_star = np.linspace(-L, L, n_grid)
    r, u_h, u_i = _r_of_rstar(model, r_star)
    v = _potential(model, ell, r, u_h, u_i)
    tail = (abs(float(v[0])), abs(float(v[-1])))
    if max(tail) > tail_tol:
        raise TruncationError(
            f"potential tail {max(tail):.3e} above {tail_tol:.1e}; increase L",
            tail_size=max(tail),
        )
    # fast scalar evaluators for ODE right-hand sides: uniform-knot cubics
    # of log u_H and log u_I (both smooth and asymptotically linear)
    n_knots = max(4000, int(30 * L))
    pad = 2.0
    t_knots = np.linspace(-L - pad, L + pad, n_knots)
    _, kh, ki = _r_of_rstar(model, t_knots)
    from scipy.interpolate import CubicSpline as _CS

    fast_uh = _make_fast(t_knots, np.log(kh))
    fast_ui = _make_fast(t_knots, np.log(ki))
    return TortoiseGrid(
        model=model, ell=int(ell), L=float(L), r_star=r_star, r=r, u_H=u_h, u_I=u_i,
        V=v, tail=tail, _fast_uh=fast_uh, _fast_ui=fast_ui,
    )


def _make_fast(t_knots, values):
    from scipy.interpolate import CubicSpline as _CS

    sp = _CS(t_knots, values)
    return _FastU(t_knots[0], t_knots[1] - t_knots[0], sp.c)


@dataclass
class OutgoingSolution:
    """Jost-type solution sampled on the grid, stored normalized.

    The stored arrays satisfy w_stored(start) = 1 + O(V(L)); the actual
    solution is w_stored * exp(scale_log) with scale_log = i sigma (-L)
    for end H and -i sigma L for end I.  The normalization keeps the inward
    integration well scaled for any Im sigma and cancels identically in the
    Green kernel w_H w_I / W.
    """

    end: str
    sigma: complex
    r_star: np.ndarray
    w: np.ndarray
    wprime: np.ndarray
    scale_log: complex

    def unnormalized(self):
        """(w, w') with the e^{scale_log} factor restored (may under/overflow)."""
        f = np.exp(self.scale_log)
        return self.w * f, self.wprime * f


def outgoing_solution(grid, sigma, end, rtol=1e-10, atol=None):
    """Integrate the outgoing solution from one end inward.

    End H: w ~ e^{+i sigma r_*} as r_* -> -inf; end I: w ~ e^{-i sigma r_*}
    as r_* -> +inf; both seeded at -+L with the first-order Jost correction
    V/(4 b (b + i sigma)) (b the end decay rate).  Inward integration runs
    in the relatively-growing direction, so the continuation is stable in
    the strip |Im sigma| < min(beta_H, |beta_I|) and beyond; solutions are
    stored with the oscillatory end factor split off (see OutgoingSolution).
    """
    sigma = complex(sigma)
    if end not in ("H", "I"):
        raise DomainError("end must be 'H' or 'I'")
    model = grid.model
    v_of = grid.potential_scalar()
    s2 = sigma * sigma

    def rhs(t, y):
        return [y[1], (v_of(t) - s2) * y[0]]

    if end == "H":
        bend = model.beta_H
        v0 = grid.V[0]
        u1 = v0 / (4.0 * bend * (bend + 1j * sigma))
        w0 = 1.0 + u1
        wp0 = 1j * sigma * (1.0 + u1) + 2.0 * bend * u1
        span = (-grid.L, grid.L)
        t_eval = grid.r_star
        scale_log = -1j * sigma * grid.L
    else:
        bend = abs(model.beta_I)
        v0 = grid.V[-1]
        u1 = v0 / (4.0 * bend * (bend + 1j * sigma))
        w0 = 1.0 + u1
        wp0 = -1j * sigma * (1.0 + u1) - 2.0 * bend * u1
        span = (grid.L, -grid.L)
        t_eval = grid.r_star[::-1]
        scale_log = -1j * sigma * grid.L
    if atol is None:
        atol = rtol
    sol = solve_ivp(
        rhs, span, np.array([w0, wp0], dtype=complex), method="DOP853",
        rtol=rtol, atol=atol, t_eval=t_eval, dense_output=False,
    )
    if not sol.success:
        raise AccuracyError(f"Jost integration failed: {sol.message}")
    w = sol.y[0]
    wp = sol.y[1]
    if end == "I":
        w = w[::-1]
        wp = wp[::-1]
    return OutgoingSolution(
        end=end, sigma=sigma, r_star=grid.r_star, w=w, wprime=wp, scale_log=scale_log
    )


def _wronskian_normalized(grid, sigma, solutions=None, n_check=16, drift_tol=1e-6,
                          rtol=1e-10):
    """Wronskian of the stored (normalized) solutions, with drift check."""
    if solutions is None:
        wh = outgoing_solution(grid, sigma, "H", rtol=rtol)
        wi = outgoing_solution(grid, sigma, "I", rtol=rtol)
    else:
        wh, wi = solutions
    n = grid.r_star.size
    idx = np.linspace(n // 4, 3 * n // 4, n_check).astype(int)
    wvals = wh.wprime[idx] * wi.w[idx] - wh.w[idx] * wi.wprime[idx]
    w_mid = wvals[n_check // 2]
    amp = np.median(
        np.abs(wh.wprime[idx]) * np.abs(wi.w[idx]) + np.abs(wh.w[idx]) * np.abs(wi.wprime[idx])
    )
    drift = float(np.max(np.abs(wvals - w_mid)))
    if abs(w_mid) > 1e-8 * amp:
        if drift > drift_tol * abs(w_mid):
            raise AccuracyError(
                f"Wronskian drift {drift / abs(w_mid):.2e} above {drift_tol:.1e} "
                f"at sigma = {sigma}"
            )
    else:
        warnings.warn(
            f"Wronskian near zero at sigma = {sigma} (|W|/scale = {abs(w_mid)/max(amp,1e-300):.2e})",
            NearResonanceWarning,
        )
    return complex(w_mid), wh, wi


def wronskian(grid, sigma, solutions=None, n_check=16, drift_tol=1e-6, rtol=1e-10):
    """W(sigma) = w_H' w_I - w_H w_I' evaluated mid-grid.

    Constancy of W across the grid is the quality metric: relative drift
    above drift_tol raises AccuracyError (skipped near zeros of W, where
    the relative measure is meaningless and a NearResonanceWarning is
    issued instead).  For the free equation W = 2 i sigma.  The returned
    value carries the true normalization e^{-2 i sigma L} of the outgoing
    solutions; it underflows for very negative Im sigma on long grids,
    where only the scale-free Green kernel remains meaningful.
    """
    w_mid, wh, wi = _wronskian_normalized(
        grid, sigma, solutions=solutions, n_check=n_check, drift_tol=drift_tol, rtol=rtol
    )
    exponent = wh.scale_log + wi.scale_log
    if abs(exponent.real) > 650.0:
        warnings.warn(
            f"Wronskian scale e^{exponent.real:.0f} not representable; returning 0/inf scale",
            RuntimeWarning,
        )
    return complex(w_mid * np.exp(exponent))


def _solve_batch(grid, sigmas, end, rtol=1e-9, t_eval=None):
    """Batched outgoing solutions for many sigma on one shared potential.

    Returns (w, wprime) arrays of shape (K, n_eval); stored normalization
    as in outgoing_solution.  One adaptive solve for the whole batch: the
    step control follows the stiffest member, which is fine for scans where
    the sigmas are of comparable size.
    """
    sigmas = np.asarray(sigmas, dtype=complex)
    k = sigmas.size
    model = grid.model
    v_of = grid.potential_scalar()
    s2 = sigmas * sigmas

    def rhs(t, y):
        out = np.empty_like(y)
        out[0::2] = y[1::2]
        out[1::2] = (v_of(t) - s2) * y[0::2]
        return out

    if end == "H":
        bend = model.beta_H
        v0 = grid.V[0]
        u1 = v0 / (4.0 * bend * (bend + 1j * sigmas))
        w0 = 1.0 + u1
        wp0 = 1j * sigmas * (1.0 + u1) + 2.0 * bend * u1
        span = (-grid.L, grid.L)
        te = grid.r_star if t_eval is None else t_eval
    else:
        bend = abs(model.beta_I)
        v0 = grid.V[-1]
        u1 = v0 / (4.0 * bend * (bend + 1j * sigmas))
        w0 = 1.0 + u1
        wp0 = -1j * sigmas * (1.0 + u1) - 2.0 * bend * u1
        span = (grid.L, -grid.L)
        te = (grid.r_star if t_eval is None else t_eval)[::-1]
    y0 = np.column_stack([w0, wp0]).ravel()
    sol = solve_ivp(rhs, span, y0, method="DOP853", rtol=rtol, atol=rtol, t_eval=te)
    if not sol.success:
        raise AccuracyError(f"batched Jost integration failed: {sol.message}")
    y = sol.y.reshape(k, 2, -1)
    w, wp = y[:, 0, :], y[:, 1, :]
    if end == "I":
        w = w[:, ::-1]
        wp = wp[:, ::-1]
    return w, wp


def wronskian_batch(grid, sigmas, rtol=1e-9, true_scale=True):
    """Wronskians for a batch of sigma values (shared adaptive solves).

    true_scale=False returns the normalized Wronskian (differs by the
    nonvanishing entire factor e^{-2 i sigma L}; same zero set), which never
    under- or overflows and is what contour scans should use.
    """
    sigmas = np.asarray(sigmas, dtype=complex)
    n = grid.r_star.size
    idx = np.linspace(n // 4, 3 * n // 4, 8).astype(int)
    te = grid.r_star[idx]
    wh, whp = _solve_batch(grid, sigmas, "H", rtol=rtol, t_eval=te)
    wi, wip = _solve_batch(grid, sigmas, "I", rtol=rtol, t_eval=te)
    wvals = whp * wi - wh * wip
    w_mid = wvals[:, wvals.shape[1] // 2]
    if true_scale:
        w_mid = w_mid * np.exp(-2j * sigmas * grid.L)
    return w_mid


# ----------------------------------------------------------------------
# resonance scan


class _WronskianCache:
    """Cached, batch-primed normalized Wronskian evaluations for scans."""

    def __init__(self, grid, rtol):
        self.grid = grid
        self.rtol = rtol
        self.cache = {}
        self.evals = 0

    @staticmethod
    def _key(sigma):
        return (round(sigma.real, 14), round(sigma.imag, 14))

    def prime(self, sigmas):
        todo = [s for s in sigmas if self._key(s) not in self.cache]
        if not todo:
            return
        vals = wronskian_batch(self.grid, np.array(todo), rtol=self.rtol, true_scale=False)
        for s, v in zip(todo, vals):
            self.cache[self._key(s)] = complex(v)
        self.evals += len(todo)

    def __call__(self, sigma):
        key = self._key(sigma)
        if key not in self.cache:
            self.prime([sigma])
        return self.cache[key]


def _rect_winding(wfun, rect, twist=0.0, pre=7, max_rounds=16, max_step_phase=1.2):
    """Winding number of W around the rectangle, with batched refinement.

    twist removes a known analytic phase factor e^{twist * sigma} from the
    evaluations (the stored Wronskian carries e^{2 i sigma L}); the factor
    is entire and nonvanishing, so it contributes nothing to the winding,
    but detwisted phase increments vary slowly and do not alias.  All
    contour points needing refinement are collected per round and evaluated
    in one batched solve, which keeps the ODE-solve count low.
    """
    re0, re1, im0, im1 = rect

    def dphi(a, b):
        ratio = wfun(b) / wfun(a) * np.exp(twist * (b - a))
        return np.angle(ratio)

    corners = [
        complex(re0, im0),
        complex(re1, im0),
        complex(re1, im1),
        complex(re0, im1),
        complex(re0, im0),
    ]
    pts = []
    for a, b in zip(corners[:-1], corners[1:]):
        for t in np.linspace(0.0, 1.0, pre)[:-1]:
            pts.append(a + t * (b - a))
    pts.append(corners[-1])
    if hasattr(wfun, "prime"):
        wfun.prime(pts)
    segments = list(zip(pts[:-1], pts[1:]))
    for _ in range(max_rounds):
        bad = [i for i, (a, b) in enumerate(segments) if abs(dphi(a, b)) > max_step_phase]
        if not bad:
            break
        mids = [0.5 * (segments[i][0] + segments[i][1]) for i in bad]
        if hasattr(wfun, "prime"):
            wfun.prime(mids)
        bad_set = set(bad)
        new_segments = []
        for i, (a, b) in enumerate(segments):
            if i in bad_set:
                m = 0.5 * (a + b)
                new_segments.extend([(a, m), (m, b)])
            else:
                new_segments.append((a, b))
        segments = new_segments
    total = sum(dphi(a, b) for a, b in segments)
    return total / (2.0 * np.pi)


def _newton_refine(wfun, sigma, tol, twist=0.0, max_iter=40):
    """Newton iteration on the detwisted Wronskian W * e^{twist * sigma}.

    The logarithmic derivative of the stored value is corrected by the
    twist, so steps are those of the physical Wronskian.
    """
    delta = 1e-6
    for _ in range(max_iter):
        if hasattr(wfun, "prime"):
            wfun.prime([sigma, sigma + delta, sigma - delta])
        w0 = wfun(sigma)
        wp = (wfun(sigma + delta) - wfun(sigma - delta)) / (2.0 * delta)
        if w0 == 0:
            return sigma, 0.0
        logderiv = wp / w0 + twist
        if logderiv == 0:
            break
        step = 1.0 / logderiv
        sigma = sigma - step
        if abs(step) < tol:
            return sigma, abs(wfun(sigma))
        delta = max(min(delta, abs(step)), 1e-9)
    return sigma, abs(wfun(sigma))



def qnm_scan(grid, rect, refine=1e-8, rtol=1e-9, max_boxes=200):
    """Argument-principle resonance scan over a rectangle in sigma.

    rect = (re_min, re_max, im_min, im_max).  Counts Wronskian zeros by
    contour winding on subdivided rectangles and Newton-refines each; the
    contour is perturbed automatically when it passes too close to a zero.
    Returns a list of dicts {sigma, multiplicity, residual}.

    The Jost continuation is controlled in the strip
    |Im sigma| < min(beta_H, |beta_I|); an upper rectangle edge beyond it
    makes the Wronskian values unreliable and triggers a warning.
    """
    strip = min(grid.model.beta_H, abs(grid.model.beta_I))
    if rect[3] > strip:
        warnings.warn(
            f"rect reaches Im sigma = {rect[3]:.4g} above the continuation strip "
            f"{strip:.4g}; zero counts there are unreliable",
            UserWarning,
        )
    wfun = _WronskianCache(grid, rtol)
    two_l = 2.0 * grid.L

    def true_abs(sigma):
        # undo the e^{2 i sigma L} normalization so magnitudes are comparable
        return abs(wfun(sigma)) * np.exp(-two_l * sigma.imag)

    def safe_winding(rc0, attempt=0):
        # perturb the contour slightly if |W| nearly vanishes on it
        re0, re1, im0, im1 = rc0
        jig = 3e-3 * max(re1 - re0, im1 - im0) * attempt
        rc = (re0 - jig, re1 + jig, im0 - jig, im1 + jig)
        edge_pts = [
            complex(rc[0] + t * (rc[1] - rc[0]), rc[2]) for t in np.linspace(0, 1, 7)
        ] + [complex(rc[0] + t * (rc[1] - rc[0]), rc[3]) for t in np.linspace(0, 1, 7)]
        wfun.prime(edge_pts)
        vals = [true_abs(s) for s in edge_pts]
        scale = np.median([v for v in vals if v > 0] or [1.0])
        if min(vals) < 1e3 * refine * max(scale, 1e-300) and attempt < 4:
            return safe_winding(rc0, attempt + 1)
        w = _rect_winding(wfun, rc, twist=-2j * grid.L)
        n = int(round(w))
        if abs(w - n) > 0.25:
            raise AccuracyError(
                f"winding {w:.3f} not close to an integer on {rc}; contour too coarse"
            )
        return n, rc

    zeros = []
    stack = [rect]
    boxes = 0
    while stack:
        rc = stack.pop()
        boxes += 1
        if boxes > max_boxes:
            raise AccuracyError("subdivision budget exceeded in qnm_scan")
        n, rc = safe_winding(rc)
        if n == 0:
            continue
        re0, re1, im0, im1 = rc
        small = max(re1 - re0, im1 - im0) < 0.05
        if n == 1 or small:
            center = complex(0.5 * (re0 + re1), 0.5 * (im0 + im1))
            sigma, resid = _newton_refine(wfun, center, refine, twist=-2j * grid.L)
            zeros.append({"sigma": sigma, "multiplicity": n, "residual": resid})
            continue
        rm = 0.5 * (re0 + re1)
        im = 0.5 * (im0 + im1)
        stack.extend(
            [(re0, rm, im0, im), (rm, re1, im0, im), (re0, rm, im, im1), (rm, re1, im, im1)]
        )
    # merge duplicates (zeros can be re-found from adjacent boxes)
    merged = []
    for z in sorted(zeros, key=lambda d: (d["sigma"].real, d["sigma"].imag)):
        if merged and abs(z["sigma"] - merged[-1]["sigma"]) < 50 * refine:
            merged[-1]["multiplicity"] = max(merged[-1]["multiplicity"], z["multiplicity"])
        else:
            merged.append(z)
    return merged


# ----------------------------------------------------------------------
# Green kernel and norm scans


def mode_green(grid, sigma, max_nodes=1200, rtol=1e-10):
    """Green kernel w_H(min) w_I(max) / W(sigma) as a KernelGrid.

    The kernel lives in the w-representation, i.e. on L^2(dr_*); trapezoid
    dr_* weights realize the Omega measure through the unitary mode map.
    A near-zero Wronskian issues NearResonanceWarning with the conditioning
    estimate in the message.
    """
    wnorm, wh, wi = _wronskian_normalized(grid, sigma, rtol=rtol, drift_tol=np.inf)
    if abs(wnorm) < 1e-8:
        warnings.warn(
            f"near-resonant Green kernel at sigma = {sigma}: conditioning ~ {1.0/max(abs(wnorm),1e-300):.2e}",
            NearResonanceWarning,
        )
    step = max(1, grid.r_star.size // max_nodes)
    idx = np.arange(0, grid.r_star.size, step)
    s = grid.r_star[idx]
    whv, wiv = wh.w[idx], wi.w[idx]
    mn = np.minimum.outer(np.arange(idx.size), np.arange(idx.size))
    mx = np.maximum.outer(np.arange(idx.size), np.arange(idx.size))
    # normalization factors of w_H, w_I cancel against the Wronskian scale
    vals = whv[mn] * wiv[mx] / wnorm
    w = np.full(idx.size, grid.h * step)
    w[0] *= 0.5
    w[-1] *= 0.5
    return KernelGrid(
        nodes_left=s[:, None],
        weights_left=w,
        nodes_right=s[:, None],
        weights_right=w,
        values=vals,
        meta={"sigma": sigma, "wronskian_normalized": wnorm, "ell": grid.ell},
    )


def green_norm(grid, sigma, weight=None, rtol=1e-10, n_iter=120, tol=1e-8, seed=7):
    """Weighted norm ||M_w G_ell(sigma) M_w|| on L^2(dr_*), semiseparable fast path.

    weight: optional array of multiplier values on the grid (e.g.
    tilde_alpha^b).  The matvec uses prefix sums in O(N), so the full
    tortoise resolution is usable; power iteration on A^H A gives the
    largest singular value.
    """
    wr, wh, wi = _wronskian_normalized(grid, sigma, rtol=rtol, drift_tol=np.inf)
    if wr == 0:
        return np.inf
    return _green_norm_core(
        grid, wh.w, wi.w, wr, weight=weight, n_iter=n_iter, tol=tol, seed=seed
    )


def _green_norm_core(grid, wh_v, wi_v, wr, weight=None, n_iter=120, tol=1e-8, seed=7):
    n = grid.r_star.size
    quad = np.full(n, grid.h)
    quad[0] *= 0.5
    quad[-1] *= 0.5
    mult = np.ones(n) if weight is None else np.asarray(weight, dtype=float)
    sq = np.sqrt(quad)
    a_left = mult * sq  # rows:  D^{1/2} M_w
    a_right = mult * sq  # cols

    def matvec(f):
        # (G f)_i = [w_I(i) * sum_{j<=i} w_H f_j + w_H(i) * sum_{j>i} w_I f_j]/W
        g = a_right * f
        p = np.cumsum(wh_v * g)
        qs = np.cumsum((wi_v * g)[::-1])[::-1]
        qs_above = np.concatenate([qs[1:], [0.0]])
        return a_left * (wi_v * p + wh_v * qs_above) / wr

    def rmatvec(f):
        # K is symmetric, so the adjoint is conj o matvec o conj
        return np.conj(matvec(np.conj(f)))

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    s_old = 0.0
    for _ in range(n_iter):
        u = matvec(v)
        s = np.linalg.norm(u)
        if s == 0:
            return 0.0
        v = rmatvec(u / s)
        nv = np.linalg.norm(v)
        v /= nv
        if abs(nv - s_old) < tol * max(nv, 1.0):
            s_old = nv
            break
        s_old = nv
    return float(s_old)


@dataclass
class ModeResolventScan:
    """Norm scan along a horizontal sigma-line for one angular mode."""

    ell: int
    b: float
    gamma: float
    logN: float | None
    sigma: np.ndarray
    norms: np.ndarray
    wronskians: np.ndarray
    M_hat: float
    flags: list = field(default_factory=list)


def norm_scan(grid, b, gamma, sigma_line=None, logN=None, rtol=1e-9):
    """Weighted mode-resolvent norms along Im sigma = gamma.

    Requires 0 < gamma < min(beta_H, |beta_I|, 1) (the continuation strip
    of the Jost method and of the weight alpha-tilde) and b > gamma, or
    b = gamma with a log weight of power logN > 1/2.  The growth exponent
    M_hat is a least-squares fit of log norm against log|Re sigma| over the
    upper half of the scanned range.
    """
    model = grid.model
    gmax = min(model.beta_H, abs(model.beta_I), 1.0)
    if not 0.0 < gamma < gmax:
        raise WeightWindowError(f"gamma must lie in (0, {gmax:.4f})")
    if b < gamma or (b == gamma and (logN is None or logN <= 0.5)):
        raise WeightWindowError(
            "need b > gamma, or b = gamma with a log weight of power N > 1/2"
        )
    if sigma_line is None:
        sigma_line = np.linspace(1.0, 20.0, 20)
    sigma_line = np.asarray(sigma_line, dtype=float)
    weight = tilde_alpha(model, grid.r, b)
    if logN is not None:
        weight = weight * psi_log_weight(model, grid.r, N=logN)
    sigmas = sigma_line + 1j * gamma
    wh_all, whp_all = _solve_batch(grid, sigmas, "H", rtol=rtol)
    wi_all, wip_all = _solve_batch(grid, sigmas, "I", rtol=rtol)
    n = grid.r_star.size
    mid = slice(n // 4, 3 * n // 4, max(1, n // 32))
    norms = np.empty(sigma_line.size)
    wr = np.empty(sigma_line.size, dtype=complex)
    flags = []
    for i, sigma in enumerate(sigmas):
        wvals = whp_all[i, mid] * wi_all[i, mid] - wh_all[i, mid] * wip_all[i, mid]
        wr[i] = wvals[wvals.size // 2]
        amp = np.median(
            np.abs(whp_all[i, mid] * wi_all[i, mid]) + np.abs(wh_all[i, mid] * wip_all[i, mid])
        )
        if abs(wr[i]) < 1e-8 * amp:
            norms[i] = np.inf
            flags.append({"sigma": complex(sigma), "flag": "resonance-on-line"})
            continue
        norms[i] = _green_norm_core(grid, wh_all[i], wi_all[i], wr[i], weight=weight)
    upper = sigma_line >= np.median(sigma_line)
    finite = np.isfinite(norms) & upper
    if np.count_nonzero(finite) >= 3:
        m_hat = float(
            np.polyfit(np.log(sigma_line[finite]), np.log(norms[finite]), 1)[0]
        )
    else:
        m_hat = np.nan
    return ModeResolventScan(
        ell=grid.ell, b=b, gamma=gamma, logN=logN, sigma=sigma_line.astype(float),
        norms=norms, wronskians=wr, M_hat=m_hat, flags=flags,
    )
