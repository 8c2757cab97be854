import numpy as np
import pytest

from hypres.errors import InvalidDeltaError
from hypres.gluing import (
    build_operators,
    cutoffs,
    glue_grid,
    gluing_residual,
    m_operator_norms,
    model_end_resolvents,
)
from hypres.radial import mode_green, tortoise


@pytest.fixture(scope="module")
def delta(model):
    return 0.05 * model.width


@pytest.fixture(scope="module")
def ggrid(model):
    return glue_grid(model, 0, L=36.0, n_grid=6001)


class TestCutoffs:
    def test_thresholds(self, model, delta):
        fam = cutoffs(model, delta)
        r = np.linspace(model.r_H + 1e-9, model.r_I - 1e-9, 4001)
        s = fam.sampled(r)
        d, rh, ri = delta, model.r_H, model.r_I
        assert np.all(s["chi1"][r > rh + 4 * d] == 1.0)
        assert np.all(s["chi1"][r < rh + 3 * d] == 0.0)
        assert np.all(s["chi1_1"][r > rh + 2 * d] == 1.0)
        assert np.all(s["chi_t1"][r < rh + 5 * d] == 0.0)
        assert np.all(s["chi2"][r < ri - 4 * d] == 1.0)
        assert np.all(s["chi2"][r > ri - 3 * d] == 0.0)
        assert np.all(s["chi"][(r > rh + d / 2) & (r < ri - d / 2)] == 1.0)
        assert np.all((s["chi"][r < rh + d / 4] == 0.0) & (s["chi"][r > ri - d / 4] == 0.0))

    def test_chi3_identity_pointwise(self, model, delta):
        fam = cutoffs(model, delta)
        r = np.linspace(model.r_H + 1e-9, model.r_I - 1e-9, 4001)
        s = fam.sampled(r)
        direct = 1 - (1 - s["chi1"]) * (1 - s["chi1_1"]) - (1 - s["chi2"]) * (1 - s["chi2_1"])
        assert np.max(np.abs(s["chi3"] - direct)) < 1e-14

    def test_ranges(self, model, delta):
        fam = cutoffs(model, delta)
        r = np.linspace(model.r_H + 1e-9, model.r_I - 1e-9, 4001)
        for name, vals in fam.sampled(r).items():
            assert np.all((vals > -1e-14) & (vals < 1 + 1e-14)), name

    def test_invalid_delta(self, model):
        with pytest.raises(InvalidDeltaError):
            cutoffs(model, model.width / 4.0)
        with pytest.raises(InvalidDeltaError):
            cutoffs(model, -0.1)


class TestEndResolvents:
    def test_scaling_identity(self, model, delta):
        # the end-H model resolvent equals beta_H^{-2} times the resolvent of
        # the beta-rescaled operator at sigma/|beta_H| (exact operator algebra)
        grid = glue_grid(model, 0, L=36.0, n_grid=1501)
        sigma = 2.0 - 0.3j
        ops = build_operators(model, 0, sigma, delta, grid=grid)
        n = grid.r_star.size
        rng = np.random.default_rng(0)
        f = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        lhs = ops.solve("T_H", f)
        bh2 = model.beta_H**2
        scaled = (ops.T_H / bh2 - (sigma / abs(model.beta_H)) ** 2 * np.eye(n)).astype(complex)
        rhs = np.linalg.solve(scaled, f) / bh2
        assert np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs) < 1e-8

    def test_agreement_with_mode_green_locally(self, model, delta):
        # deep inside the H end (where the flattened metric coincides with
        # the exact one) the end resolvent agrees with the Jost Green kernel
        # at a spectral point far enough into the physical half plane that
        # truncation walls are invisible; the gap is pure FD discretization
        # error and shrinks at stencil order
        sigma = 2.0 - 2.0j
        errs = []
        for n_grid in (2001, 4001):
            grid = glue_grid(model, 1, L=36.0, n_grid=n_grid)
            ops = build_operators(model, 1, sigma, delta, grid=grid)
            s = grid.r_star
            f = np.exp(-((s + 22.0) / 2.0) ** 2).astype(complex)  # deep H-side
            u_end = ops.solve("T_H", f)
            jost = tortoise(model, 1, L=36.0, n_grid=n_grid, tail_tol=np.inf)
            kg = mode_green(jost, sigma, max_nodes=n_grid)
            u_green = kg.values @ (kg.weights_right * f)
            sel = np.abs(s + 22.0) < 6.0
            errs.append(np.linalg.norm((u_end - u_green)[sel]) / np.linalg.norm(u_green[sel]))
        assert errs[1] < 1e-3
        # the trapezoid kernel application limits the comparison to 2nd order
        assert errs[1] < errs[0] / 3.0

    def test_kernel_grids_finite(self, model, delta):
        r_h, r_i = model_end_resolvents(model, 0, 2.0 - 0.5j, delta, n_grid=801)
        assert np.all(np.isfinite(r_h.values))
        assert np.all(np.isfinite(r_i.values))


class TestIdentities:
    def test_residuals_fine(self, model, delta, ggrid):
        res = gluing_residual(model, 0, 2.0 - 0.01j, delta, grid=ggrid)
        for key in ("residentity1", "residentity2", "brpkid"):
            assert res[key] < 1e-8, (key, res[key])

    def test_residuals_other_mode_and_sigma(self, model, delta):
        grid = glue_grid(model, 2, L=36.0, n_grid=6001)
        res = gluing_residual(model, 2, 3.0 - 0.05j, delta, grid=grid)
        for key in ("residentity1", "residentity2", "brpkid"):
            assert res[key] < 1e-7, (key, res[key])

    def test_refinement_order(self, model, delta):
        sizes = (1501, 3001, 6001)
        results = []
        for n in sizes:
            grid = glue_grid(model, 0, L=36.0, n_grid=n)
            results.append(gluing_residual(model, 0, 2.0 - 0.01j, delta, grid=grid))
        for key in ("residentity1", "residentity2", "brpkid"):
            vals = [r[key] for r in results]
            slopes = np.log(np.array(vals[:-1]) / np.array(vals[1:])) / np.log(2.0)
            assert np.all(slopes > 2.0), (key, vals)

    def test_dual_identities_comparable(self, model, delta, ggrid):
        res = gluing_residual(model, 0, 2.0 - 0.01j, delta, grid=ggrid)
        r1, r2 = res["residentity1"], res["residentity2"]
        assert r1 < 10 * r2 + 1e-12 and r2 < 10 * r1 + 1e-12


class TestMNorms:
    def test_growth_fit_at_most_linear(self, model, delta):
        grid = glue_grid(model, 0, L=36.0, n_grid=3001)
        out = m_operator_norms(model, 0, np.linspace(2.0, 12.0, 5), delta,
                               grid=grid, gamma=0.04)
        assert out["fit_exponent_M1"] < 1.2
        assert out["fit_exponent_M2"] < 1.2
        assert np.all(np.isfinite(out["M1"]))
        assert np.all(np.isfinite(out["M2"]))
