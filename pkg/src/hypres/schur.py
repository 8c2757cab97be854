"""Weighted operator-norm machinery on the ball: Schur bounds, kernel grids,
Neumann-series resolvent assembly.

Kernels are trivialized by the metric volume density: an operator acts as
(Bf)(z) = int B(z,z') f(z') dg(z'), and its discrete L^2(dg) -> L^2(dg) norm
is the largest singular value of D_L^{1/2} K D_R^{1/2} with D the quadrature
weights.  The four-case Schur bound certifies |B(z,z')| <= C rho_L^a rho_R^b
kernels: finite for a, b > n/2, finite with a |log x|^{-N} factor (N > 1/2)
at a borderline exponent, divergent otherwise.

Quadrature grids are geometrically graded toward |z| = 1 (ratio 1/2), since
all the weight integrals concentrate at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import svds

from .errors import DomainError, PerturbativeRegimeError, SchurRangeError, WeightWindowError
from .hyperbolic import boundary_triple, dist0_closed
from .metrics import boundary_x, metric_matrix
from .parametrix import build_fans, e_from_fields, g_from_fields

__all__ = [
    "DIVERGENT",
    "KernelGrid",
    "ball_grid",
    "validate_quadrature",
    "grid_norm",
    "schur_bound",
    "schur_row_integrals",
    "PairData",
    "build_pair_data",
    "error_kernel_grid",
    "parametrix_kernel_grid",
    "weighted_error_norm",
    "resolvent_assemble",
]


class _Divergent:
    """Sentinel for Schur bounds that do not exist without a log weight."""

    def __repr__(self):
        return "DIVERGENT"

    def __bool__(self):
        return False


DIVERGENT = _Divergent()


@dataclass
class KernelGrid:
    """Discretized two-point kernel with quadrature weights for dg.

    values[i, j] = K(z_i, z'_j); weight_spec records (a, b, logN_left,
    logN_right) when the stored values are already weighted.
    """

    nodes_left: np.ndarray
    weights_left: np.ndarray
    nodes_right: np.ndarray
    weights_right: np.ndarray
    values: np.ndarray
    weight_spec: tuple = (0.0, 0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.weights_left <= 0) or np.any(self.weights_right <= 0):
            raise DomainError("quadrature weights must be positive")
        if self.values.shape != (self.nodes_left.shape[0], self.nodes_right.shape[0]):
            raise DomainError("kernel value array does not match the node sets")

    @property
    def square(self):
        return self.values.shape[0] == self.values.shape[1]

    def weighted_matrix(self):
        return (
            np.sqrt(self.weights_left)[:, None]
            * self.values
            * np.sqrt(self.weights_right)[None, :]
        )


def _gauss_legendre(a, b, k):
    x, w = np.polynomial.legendre.leggauss(k)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def ball_grid(spec=None, levels=12, per_level=2, n_cos=3, n_psi=6, inner_k=4):
    """Boundary-refined quadrature nodes and dg_delta weights for the 3-ball.

    Radial shells [1-2^-k, 1-2^-(k-1)] for k = 1..levels, geometric ratio
    1/2, per_level Gauss points each (the innermost ball gets inner_k
    points); angular product rule: n_cos Gauss points in cos(phi) x n_psi
    uniform in psi.  With spec given the weights use its metric volume
    density, otherwise the unperturbed g0.

    Returns (nodes, weights).
    """
    rho_nodes, rho_w = _gauss_legendre(0.0, 0.5, inner_k)
    for k in range(1, levels):
        a, b = 1.0 - 2.0 ** (-k), 1.0 - 2.0 ** (-k - 1)
        x, w = _gauss_legendre(a, b, per_level)
        rho_nodes = np.concatenate([rho_nodes, x])
        rho_w = np.concatenate([rho_w, w])
    mu, mu_w = np.polynomial.legendre.leggauss(n_cos)  # mu = cos(phi)
    psi = np.arange(n_psi) * 2.0 * np.pi / n_psi
    psi_w = np.full(n_psi, 2.0 * np.pi / n_psi)
    s = np.sqrt(1.0 - mu**2)
    dirs = np.stack(
        [
            s[:, None] * np.cos(psi)[None, :],
            s[:, None] * np.sin(psi)[None, :],
            np.broadcast_to(mu[:, None], (mu.size, n_psi)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    ang_w = (mu_w[:, None] * psi_w[None, :]).reshape(-1)
    nodes = rho_nodes[:, None, None] * dirs[None, :, :]
    nodes = nodes.reshape(-1, 3)
    euc_w = (rho_w[:, None] * ang_w[None, :]).reshape(-1) * np.repeat(
        rho_nodes**2, dirs.shape[0]
    )
    if spec is None:
        dens = (2.0 / (1.0 - np.sum(nodes**2, axis=1))) ** 3
    else:
        dens = np.sqrt(np.linalg.det(metric_matrix(spec, nodes)))
    return nodes, euc_w * dens


def validate_quadrature(nodes, weights, tol=0.01):
    """Check the dg-weights integrate two smooth reference functions to < tol.

    Uses f = (1-|z|^2)^3 and (1-|z|^2)^4 whose dg_0 integrals are exact
    multiples of the ball volume; valid for unperturbed weights (the
    perturbed density differs by O(delta * H) which is within tolerance for
    the built-in families).
    """
    r2 = np.sum(nodes**2, axis=1)
    vol = 4.0 * np.pi / 3.0
    exact3 = 8.0 * vol
    exact4 = 8.0 * (vol - 4.0 * np.pi / 5.0)
    got3 = np.sum(weights * (1.0 - r2) ** 3)
    got4 = np.sum(weights * (1.0 - r2) ** 4)
    rel3 = abs(got3 - exact3) / exact3
    rel4 = abs(got4 - exact4) / exact4
    ok = rel3 < tol and rel4 < tol
    return {"ok": ok, "rel_err": (rel3, rel4)}


def grid_norm(grid, tol=1e-10):
    """Discrete L^2(dg) -> L^2(dg) operator norm: largest singular value of
    D_L^{1/2} K D_R^{1/2}; dense SVD below 4000^2, power iteration above."""
    m = grid.weighted_matrix()
    if max(m.shape) <= 4000:
        return float(np.linalg.svd(m, compute_uv=False)[0])
    k = svds(m, k=1, tol=tol, return_singular_vectors=False)
    return float(k[0])


# ----------------------------------------------------------------------
# Schur bound


def _log_weight(x, n_pow):
    """|log x|^{-N} below x = 1/4, 1 above x = 1/2, smoothly blended."""
    x = np.asarray(x, dtype=float)
    raw = np.abs(np.log(np.minimum(x, 0.9999))) ** (-n_pow)
    t = np.clip((x - 0.25) / 0.25, 0.0, 1.0)
    s = t * t * (3.0 - 2.0 * t)
    return np.where(x >= 0.5, 1.0, raw + (1.0 - raw) * s)


def _graded_gauss(a_small, b, per_level):
    """Geometrically graded Gauss rule on [a_small, b], refined toward a_small."""
    edges = [b]
    e = b
    while e > a_small * 2.0:
        e *= 0.5
        edges.append(e)
    edges.append(a_small)
    xs, ws = [], []
    for hi, lo in zip(edges[:-1], edges[1:]):
        x, w = _gauss_legendre(lo, hi, per_level)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def _row_integral_profile(alpha, beta, n, logN_left, logN_right, levels, z_depths):
    """Schur row integrals x(z)^{-n/2} int K (x')^{n/2} dg' at left points z.

    The model majorant rho_L^alpha rho_R^beta is rotation invariant, so the
    left point reduces to a radius and the z' integral to a polar 2D one;
    the angular variable is graded toward the axis because the integrand
    concentrates around z' || z when z approaches the boundary.
    """
    one_m_rho, w_rho = _graded_gauss(2.0 ** (-levels - 2), 1.0, 3)
    rho = 1.0 - one_m_rho
    one_m_u, w_u = _graded_gauss(1e-11, 2.0, 4)
    u = 1.0 - one_m_u
    rr, uu = np.meshgrid(rho, u, indexing="ij")
    ww = w_rho[:, None] * w_u[None, :]
    b_face = 1.0 - rr * rr  # 1 - |z'|^2
    xr = (1.0 - rr) / (1.0 + rr)
    dens = rr * rr * (2.0 / b_face) ** (n + 1)  # |z'|^2 * hyperbolic density (dim n+1)
    vals = np.empty(z_depths.size)
    for i, t in enumerate(z_depths):
        a_face = 1.0 - t * t
        q = t * t + rr * rr - 2.0 * t * rr * uu
        rfront = np.sqrt(a_face**2 + b_face**2 + q)
        ker = (a_face / rfront) ** alpha * (b_face / rfront) ** beta
        if logN_right:
            ker = ker * _log_weight(xr, logN_right)
        total = 2.0 * np.pi * np.sum(ww * ker * xr ** (n / 2.0) * dens)
        xl = (1.0 - t) / (1.0 + t)
        if logN_left:
            total *= _log_weight(xl, logN_left)
        vals[i] = xl ** (-n / 2.0) * total
    return vals


def schur_row_integrals(alpha, beta, n=2, logN=None, levels_list=(8, 12, 16, 20)):
    """Supremum row integrals at increasing refinement; the divergence probe.

    At a borderline exponent without its log weight the values grow with
    refinement; with alpha, beta > n/2 (or the log weight supplied) they
    stabilize.
    """
    out = []
    logn_left = logN if (logN and abs(alpha - n / 2.0) < 1e-9) else 0.0
    logn_right = logN if (logN and abs(beta - n / 2.0) < 1e-9) else 0.0
    for lv in levels_list:
        depths = 1.0 - np.concatenate([2.0 ** (-np.arange(1, lv + 1)), [2.0 ** (-lv - 1)]])
        vals = _row_integral_profile(alpha, beta, n, logn_left, logn_right, lv, depths)
        out.append(float(np.max(vals)))
    return out


def schur_bound(alpha, beta, C, n=2, logN=None, levels=14):
    """Certified operator-norm bound C' * C for |K| <= C rho_L^alpha rho_R^beta.

    Four cases: alpha, beta > n/2 gives a finite bound; a borderline
    exponent (|alpha - n/2| < 1e-9) requires its log weight with N > 1/2,
    otherwise DIVERGENT is returned; alpha or beta below n/2 is outside the
    lemma and raises SchurRangeError.  C' is computed by maximizing the
    weighted row/column integrals of the majorant over a boundary-refined
    grid, so it is a genuine upper bound up to quadrature tolerance.
    """
    if C < 0:
        raise DomainError("C must be nonnegative")
    half = n / 2.0
    border_l = abs(alpha - half) < 1e-9
    border_r = abs(beta - half) < 1e-9
    if alpha < half - 1e-9 or beta < half - 1e-9:
        raise SchurRangeError(
            f"exponents ({alpha}, {beta}) below n/2 = {half}: outside the four-case bound"
        )
    need_log = border_l or border_r
    if need_log and (logN is None or logN <= 0.5):
        return DIVERGENT
    logn_left = logN if border_l else 0.0
    logn_right = logN if border_r else 0.0
    depths = 1.0 - np.concatenate(
        [2.0 ** (-np.arange(1, levels + 2, 0.5))]
    )
    rows = _row_integral_profile(alpha, beta, n, logn_left, logn_right, levels, depths)
    cols = _row_integral_profile(beta, alpha, n, logn_right, logn_left, levels, depths)
    return float(C * np.sqrt(np.max(rows) * np.max(cols)))


# ----------------------------------------------------------------------
# kernel grids for the parametrix and its error


@dataclass
class PairData:
    """Amplitude fields sampled on all ordered node pairs of one grid.

    r, U0, Q, PQ are (N, N) arrays (diagonal zeroed: the integrable
    diagonal cell is dropped from the discretization); x are the weight
    coordinates of the nodes.
    """

    spec: object
    nodes: np.ndarray
    weights: np.ndarray
    x: np.ndarray
    r: np.ndarray
    U0: np.ndarray
    Q: np.ndarray
    PQ: np.ndarray
    meta: dict = field(default_factory=dict)


def build_pair_data(spec, nodes=None, weights=None, levels=10, per_level=2,
                    n_cos=3, n_psi=6, fan_kw=None, verbose=False):
    """Amplitude fans at every node and field matrices for all pairs.

    The expensive step (one variational-ODE fan per column node) is done
    once; kernels for any (h, sigma) follow by attaching phases.
    """
    if nodes is None:
        nodes, weights = ball_grid(
            spec=spec, levels=levels, per_level=per_level, n_cos=n_cos, n_psi=n_psi
        )
    n = nodes.shape[0]
    d0 = dist0_closed(nodes[:, None, :], nodes[None, :, :])
    dist_max = float(np.max(d0))
    margin = float(np.min(np.log((1.0 - np.linalg.norm(nodes, axis=1)) / 1e-11)))
    r_max = min(1.05 * dist_max + 0.5, margin * 0.98)
    if r_max < dist_max:
        raise DomainError(
            f"grid too deep for fan radius: need {dist_max:.2f}, admissible {r_max:.2f}"
        )
    kw = {"n_phi": 8, "n_psi": 12, "n_r": 120, "rtol": 1e-9}
    if fan_kw:
        kw.update(fan_kw)
    fans = build_fans(spec, nodes, r_max=r_max, **kw)
    r = np.zeros((n, n))
    u0m = np.zeros((n, n))
    qm = np.zeros((n, n))
    pqm = np.zeros((n, n))
    idx = np.arange(n)
    for j, fan in enumerate(fans):
        rows = idx != j
        fields = fan.evaluate_pairs(nodes[rows])
        r[rows, j] = fields["r"]
        u0m[rows, j] = fields["U0"]
        qm[rows, j] = fields["Q"]
        pqm[rows, j] = fields["PQ"]
    return PairData(
        spec=spec,
        nodes=nodes,
        weights=weights,
        x=boundary_x(nodes),
        r=r,
        U0=u0m,
        Q=qm,
        PQ=pqm,
        meta={"r_max": r_max, "fan_kw": kw},
    )


def _pair_fields(pair):
    return {"r": pair.r, "U0": pair.U0, "Q": pair.Q, "PQ": pair.PQ}


def error_kernel_grid(pair, sp, b):
    """KernelGrid of the weighted error kernel x^{-b} E(h, sigma) x^{b}."""
    vals = e_from_fields(_pair_fields(pair), sp)
    np.fill_diagonal(vals, 0.0)
    w = pair.x ** (-b)
    vals = w[:, None] * vals * (pair.x**b)[None, :]
    return KernelGrid(
        nodes_left=pair.nodes,
        weights_left=pair.weights,
        nodes_right=pair.nodes,
        weights_right=pair.weights,
        values=vals,
        weight_spec=(-b, b, 0.0, 0.0),
        meta={"kind": "error", "h": sp.h, "sigma": sp.sigma},
    )


def parametrix_kernel_grid(pair, sp, a, b):
    """KernelGrid of the weighted parametrix kernel x^{a} G(h, sigma) x^{b}."""
    vals = g_from_fields(_pair_fields(pair), sp)
    np.fill_diagonal(vals, 0.0)
    vals = (pair.x**a)[:, None] * vals * (pair.x**b)[None, :]
    return KernelGrid(
        nodes_left=pair.nodes,
        weights_left=pair.weights,
        nodes_right=pair.nodes,
        weights_right=pair.weights,
        values=vals,
        weight_spec=(a, b, 0.0, 0.0),
        meta={"kind": "parametrix", "h": sp.h, "sigma": sp.sigma},
    )


def weighted_error_norm(spec, sp, b, pair=None, **grid_kw):
    """Discrete norm of x^{-b} E(h, sigma) x^{b}.

    The admissible window in dimension three is Im(sigma)/h < b < 2 -
    Im(sigma)/h with b >= 0; outside it the kernel bound fails and
    WeightWindowError is raised.
    """
    strip = sp.strip
    if not (b >= 0.0 and strip < b < 2.0 - strip):
        raise WeightWindowError(
            f"b = {b} outside the window ({strip:.3f}, {2.0 - strip:.3f}) of the "
            "three-dimensional error bound"
        )
    if pair is None:
        pair = build_pair_data(spec, **grid_kw)
    return grid_norm(error_kernel_grid(pair, sp, b))


def resolvent_assemble(G, E, a, b):
    """Neumann-series resolvent from parametrix and error kernels.

    Solves the discrete operator equation (I + E_w) X = G_w, where E_w is
    the weighted error kernel grid (square) and G_w the weighted parametrix
    grid on the same left nodes; requires the Neumann condition
    grid_norm(E_w) < 1 and returns X as a KernelGrid.
    """
    if not E.square:
        raise DomainError("E grid must be square")
    if E.values.shape[0] != G.values.shape[0]:
        raise DomainError("E and G grids must share their left nodes")
    q = grid_norm(E)
    if q >= 1.0:
        raise PerturbativeRegimeError(
            f"weighted error norm {q:.3f} >= 1: not in the perturbative regime"
        )
    # discrete operator composition: (E X)(z_i) = sum_k E_ik w_k X_kj
    a_mat = np.eye(E.values.shape[0]) + E.values * E.weights_right[None, :]
    x = np.linalg.solve(a_mat, G.values)
    resid = np.linalg.norm(a_mat @ x - G.values) / max(np.linalg.norm(G.values), 1e-300)
    return KernelGrid(
        nodes_left=G.nodes_left,
        weights_left=G.weights_left,
        nodes_right=G.nodes_right,
        weights_right=G.weights_right,
        values=x,
        weight_spec=G.weight_spec,
        meta={"kind": "resolvent", "neumann_q": q, "solver_residual": float(resid),
              **G.meta},
    )
