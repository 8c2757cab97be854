import warnings

import numpy as np
import pytest

from hypres.errors import AccuracyError, NearResonanceWarning, TruncationError, WeightWindowError
from hypres.desitter import alpha2, tilde_alpha
from hypres.radial import (
    TortoiseGrid,
    green_norm,
    mode_green,
    norm_scan,
    outgoing_solution,
    qnm_scan,
    tortoise,
    wronskian,
    wronskian_batch,
)
from hypres.schur import grid_norm


def free_grid(model, L=20.0, n=2001):
    """Synthetic zero-potential grid (the free radial equation)."""

    class _Free(TortoiseGrid):
        def potential_scalar(self):
            return lambda t: 0.0

    s = np.linspace(-L, L, n)
    return _Free(
        model=model, ell=0, L=L, r_star=s, r=np.full(n, 3.0),
        u_H=np.ones(n), u_I=np.ones(n), V=np.zeros(n), tail=(0.0, 0.0),
    )


class TestTortoise:
    def test_monotone_map(self, grids, model):
        g = grids[0]
        mid = np.abs(g.r_star) < 50.0  # tails are flat at rounding level
        num = np.gradient(g.r, g.r_star)[mid]
        np.testing.assert_allclose(num, alpha2(model, g.r[mid]), rtol=1e-4)

    def test_exponential_approach_rates(self, grids, model):
        g = grids[0]
        left = g.r_star < -0.7 * g.L
        slope = np.polyfit(g.r_star[left], np.log(g.u_H[left]), 1)[0]
        assert slope == pytest.approx(2.0 * model.beta_H, rel=0.01)
        right = g.r_star > 0.7 * g.L
        slope = np.polyfit(g.r_star[right], np.log(g.u_I[right]), 1)[0]
        assert slope == pytest.approx(-2.0 * abs(model.beta_I), rel=0.01)

    def test_potential_tail_rates(self, grids, model):
        g = grids[1]
        left = g.r_star < -0.7 * g.L
        slope = np.polyfit(g.r_star[left], np.log(g.V[left]), 1)[0]
        assert slope == pytest.approx(2.0 * model.beta_H, rel=0.01)

    def test_ell0_potential_smooth_bounded(self, grids):
        g = grids[0]
        assert np.all(np.isfinite(g.V))
        assert np.max(np.abs(g.V)) < 1.0

    def test_truncation_error(self, model):
        with pytest.raises(TruncationError):
            tortoise(model, 0, L=40.0, tail_tol=1e-10)

    def test_zero_mode_solves_ell0(self, grids):
        # w = r solves -w'' + V w = 0 for ell = 0 (sigma = 0 zero mode)
        g = grids[0]
        h = g.h
        w = g.r
        resid = -(w[2:] - 2 * w[1:-1] + w[:-2]) / h**2 + g.V[1:-1] * w[1:-1]
        assert np.max(np.abs(resid)) < 1e-7


class TestOutgoing:
    def test_free_solutions_exact(self, model):
        g = free_grid(model)
        for sigma, end, sign, tol in (
            (1.5 + 0.0j, "H", 1, 1e-8),
            (1.5 + 0.0j, "I", -1, 1e-8),
            # for growing solutions the dense-output interpolant between the
            # large free-equation steps limits pointwise accuracy
            (0.7 + 0.3j, "H", 1, 1e-4),
        ):
            sol = outgoing_solution(g, sigma, end, rtol=1e-12)
            w, _ = sol.unnormalized()
            expected = np.exp(sign * 1j * sigma * g.r_star)
            rel = np.abs(w - expected) / np.abs(expected)
            assert rel.max() < tol

    def test_free_wronskian(self, model):
        g = free_grid(model)
        for sigma in (1.5 + 0.0j, 2.0 - 0.5j, 0.7 + 0.3j):
            assert wronskian(g, sigma, rtol=1e-12) == pytest.approx(2j * sigma, rel=1e-8)

    def test_physical_side_decay_toward_own_end(self, grids):
        # Im sigma < 0: the outgoing solution decays approaching its end
        g = grids[1]
        sol = outgoing_solution(g, 1.0 - 0.3j, "H")
        w, _ = sol.unnormalized()
        assert abs(w[0]) < 1e-10 * abs(w[w.size // 2])


class TestWronskian:
    def test_drift_check_passes(self, grids):
        wronskian(grids[1], 2.0 - 0.5j, drift_tol=1e-6)

    def test_zero_mode_at_origin(self, grids):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            w0 = wronskian(grids[0], 0.0 + 0.0j, drift_tol=np.inf)
            w_scale = wronskian(grids[0], 0.05 + 0.0j, drift_tol=np.inf)
        assert abs(w0) < 1e-7 * abs(w_scale) / 0.05

    def test_ell1_no_zero_at_origin(self, grids):
        w0 = wronskian(grids[1], 0.0 + 0.0j, drift_tol=np.inf)
        assert abs(w0) > 0.5

    def test_reflection_symmetry(self, grids):
        sigma = 0.31 + 0.017j
        wa = wronskian(grids[1], sigma, drift_tol=np.inf)
        wb = wronskian(grids[1], -np.conj(sigma), drift_tol=np.inf)
        assert abs(wa - np.conj(wb)) / abs(wa) < 1e-8

    def test_batch_matches_single(self, grids):
        sig = np.array([0.3 + 0.01j, -0.2 + 0.015j, 0.45 - 0.05j])
        batch = wronskian_batch(grids[0], sig, rtol=1e-10)
        for s, v in zip(sig, batch):
            single = wronskian(grids[0], s, drift_tol=np.inf, rtol=1e-10)
            assert abs(v - single) / abs(single) < 1e-6


class TestQnmScan:
    def test_ell0_single_simple_zero(self, grids):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            zeros = qnm_scan(grids[0], (-0.5, 0.5, -0.1, 0.02), refine=1e-8)
        assert len(zeros) == 1
        assert zeros[0]["multiplicity"] == 1
        assert abs(zeros[0]["sigma"]) < 1e-8

    def test_higher_modes_empty(self, grids):
        for ell in (1, 2):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                zeros = qnm_scan(grids[ell], (-0.5, 0.5, -0.1, 0.02), refine=1e-8)
            assert zeros == []

    def test_count_stable_under_subdivision(self, grids):
        # scanning the halves separately must find the same zero count
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            left = qnm_scan(grids[0], (-0.5, 0.013, -0.1, 0.02), refine=1e-8)
            right = qnm_scan(grids[0], (0.013, 0.5, -0.1, 0.02), refine=1e-8)
        assert len(left) + len(right) == 1

    def test_mirrored_bands_agree(self, grids):
        # within the continuation strip, zero counts of a band and of its
        # Re-mirror agree (W(-conj sigma) = conj W(sigma))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            right = qnm_scan(grids[1], (0.05, 0.5, 0.0, 0.045), refine=1e-6)
            left = qnm_scan(grids[1], (-0.5, -0.05, 0.0, 0.045), refine=1e-6)
        assert len(right) == len(left)

    def test_strip_warning(self, grids):
        with pytest.warns(UserWarning, match="continuation strip"):
            with warnings.catch_warnings():
                warnings.simplefilter("always")
                qnm_scan(grids[1], (0.1, 0.2, 0.05, 0.08), refine=1e-4, max_boxes=20)


class TestGreen:
    def test_discrete_delta(self, model):
        # any two independent solutions give the delta property; use a short
        # fine grid where 4th-order stencils resolve the kernel
        g = tortoise(model, 1, L=40.0, n_grid=24001, tail_tol=np.inf)
        sigma = 2.0 - 0.5j
        wh = outgoing_solution(g, sigma, "H")
        wi = outgoing_solution(g, sigma, "I")
        wr = wh.wprime * wi.w - wh.w * wi.wprime
        wr = wr[g.r_star.size // 2]
        h = g.h
        for j in (6000, 12000, 18000):
            col = np.where(np.arange(g.r_star.size) <= j, wh.w * wi.w[j], wi.w * wh.w[j]) / wr
            d2 = np.zeros_like(col)
            d2[2:-2] = (-col[4:] + 16 * col[3:-1] - 30 * col[2:-2] + 16 * col[1:-3] - col[:-4]) / (
                12 * h * h
            )
            resid = -d2 + (g.V - sigma**2) * col
            mask = np.ones(col.size, bool)
            mask[:2] = mask[-2:] = False
            mask[abs(np.arange(col.size) - j) <= 3] = False
            assert np.max(np.abs(resid[mask])) / np.max(np.abs(col)) < 5e-6

    def test_kernel_symmetric(self, grids):
        kg = mode_green(grids[1], 2.0 - 0.5j, max_nodes=400)
        assert np.max(np.abs(kg.values - kg.values.T)) == 0.0

    def test_near_resonance_warning(self, grids):
        with pytest.warns(NearResonanceWarning):
            mode_green(grids[0], 1e-9 + 0.0j)

    def test_square_integrable_physical_side(self, model, grids):
        # Im sigma < 0: kernel norms stable when L grows
        norms = []
        for L in (200.0, 264.0):
            g = tortoise(model, 1, L=L)
            norms.append(green_norm(g, 1.0 - 0.4j))
        assert abs(norms[1] - norms[0]) / norms[0] < 1e-3

    def test_fast_norm_matches_dense(self, grids):
        sigma = 1.0 - 0.5j
        fast = green_norm(grids[1], sigma)
        dense = grid_norm(mode_green(grids[1], sigma, max_nodes=900))
        assert fast == pytest.approx(dense, rel=5e-3)

    def test_spectral_theorem_anchor(self, grids):
        # physical-side norms within a factor 3 of 1/dist(sigma^2, [0, inf))
        for sigma in (1.0 - 0.5j, 2.0 - 0.4j, 0.6 - 0.8j):
            nrm = green_norm(grids[1], sigma)
            dist = abs((sigma**2).imag) if (sigma**2).real > 0 else abs(sigma**2)
            assert nrm <= 3.0 / dist
            assert nrm >= 1.0 / (3.0 * dist)


class TestNormScan:
    def test_finite_norms_and_m_hat(self, grids, model):
        scan = norm_scan(grids[1], b=0.06, gamma=0.04, sigma_line=np.linspace(1, 20, 10))
        assert np.all(np.isfinite(scan.norms))
        assert np.isfinite(scan.M_hat)

    def test_borderline_with_log_weight(self, grids):
        scan = norm_scan(grids[1], b=0.04, gamma=0.04, logN=1.0, sigma_line=np.linspace(1, 12, 6))
        assert np.all(np.isfinite(scan.norms))

    def test_window_validation(self, grids):
        with pytest.raises(WeightWindowError):
            norm_scan(grids[1], b=0.03, gamma=0.04)
        with pytest.raises(WeightWindowError):
            norm_scan(grids[1], b=0.04, gamma=0.04)  # borderline without log
        with pytest.raises(WeightWindowError):
            norm_scan(grids[1], b=0.2, gamma=0.1)  # gamma above the strip

    def test_physical_side_uniform_bound(self, grids, model):
        # Im sigma = -gamma: spectral-theorem side, norms uniformly bounded
        # and decaying with |Re sigma|
        weight = tilde_alpha(model, grids[2].r, 0.06)
        sig = np.linspace(2.0, 12.0, 5)
        norms = [green_norm(grids[2], complex(s, -0.04), weight=weight) for s in sig]
        assert np.all(np.isfinite(norms))
        assert norms[-1] < norms[0]
