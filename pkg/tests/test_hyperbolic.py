import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypres.errors import DomainError, SingularInputError
from hypres.hyperbolic import (
    boundary_triple,
    dist0_closed,
    log_map_ball,
    log_structure_F,
    mobius_translate,
)


def interior_points(dim=3, max_r=0.95):
    return st.lists(
        st.floats(-0.57, 0.57, allow_nan=False), min_size=dim, max_size=dim
    ).map(np.array).filter(lambda z: np.linalg.norm(z) < max_r)


class TestDistance:
    def test_coincident(self):
        assert dist0_closed([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]) == 0.0

    def test_radial_value(self):
        # d(0, z) = log((1+|z|)/(1-|z|))
        assert dist0_closed([0, 0, 0], [0.5, 0, 0]) == pytest.approx(np.log(3.0), rel=1e-14)

    def test_diameter_additivity(self):
        d = dist0_closed([0.3, 0, 0], [-0.3, 0, 0])
        assert d == pytest.approx(2.0 * np.log(13.0 / 7.0), rel=1e-14)

    def test_colinear_oracle_small_separation(self):
        # points on a diameter: d = log((1+b)/(1-b)) - log((1+a)/(1-a)), exact
        # even for separations where the closed form must switch branches
        a = 0.5
        for eps in (1e-3, 1e-6, 1e-10, 1e-13):
            b = a + eps
            expected = np.log((1 + b) / (1 - b)) - np.log((1 + a) / (1 - a))
            got = dist0_closed([a, 0, 0], [b, 0, 0])
            assert got == pytest.approx(expected, rel=1e-9)

    def test_rejects_boundary(self):
        with pytest.raises(DomainError):
            dist0_closed([1.0, 0, 0], [0, 0, 0])

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            dist0_closed([0.1, 0.0], [0.1, 0.0, 0.0])

    @settings(max_examples=60, deadline=None)
    @given(interior_points(), interior_points())
    def test_symmetry(self, z, zp):
        assert dist0_closed(z, zp) == pytest.approx(dist0_closed(zp, z), abs=1e-13)

    def test_triangle_inequality_bulk(self):
        rng = np.random.default_rng(42)
        z = rng.uniform(-0.57, 0.57, (10_000, 3))
        zp = rng.uniform(-0.57, 0.57, (10_000, 3))
        w = rng.uniform(-0.57, 0.57, (10_000, 3))
        lhs = dist0_closed(z, w)
        rhs = dist0_closed(z, zp) + dist0_closed(zp, w)
        assert np.all(lhs <= rhs + 1e-12)


class TestBoundaryTriple:
    def test_center(self):
        t = boundary_triple([0.0, 0, 0], [0.0, 0, 0])
        assert t.front == pytest.approx(np.sqrt(2.0), rel=1e-15)
        assert t.rho_l == pytest.approx(1.0 / np.sqrt(2.0), rel=1e-15)
        assert t.rho_r == pytest.approx(1.0 / np.sqrt(2.0), rel=1e-15)

    def test_deep_diagonal(self):
        r = np.sqrt(1.0 - 1e-3)
        z = np.array([r, 0.0, 0.0])
        t = boundary_triple(z, z)
        assert t.rho_l == pytest.approx(1.0 / np.sqrt(2.0), rel=1e-12)
        assert t.front == pytest.approx(np.sqrt(2.0) * 1e-3, rel=1e-10)

    def test_one_sided_limit(self):
        z = np.zeros(3)
        rho_r_prev = None
        for depth in (1e-2, 1e-4, 1e-6):
            zp = np.array([1.0 - depth, 0.0, 0.0])
            t = boundary_triple(z, zp)
            assert 0.3 < t.rho_l < 1.0  # stays bounded positive
            if rho_r_prev is not None:
                assert t.rho_r < rho_r_prev
            rho_r_prev = t.rho_r
        assert rho_r_prev < 1e-5

    def test_product_relation(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(-0.5, 0.5, (50, 3))
        zp = rng.uniform(-0.5, 0.5, (50, 3))
        t = boundary_triple(z, zp)
        np.testing.assert_allclose(t.rho_l * t.front, 1 - np.sum(z * z, axis=1), rtol=1e-14)
        np.testing.assert_allclose(t.rho_r * t.front, 1 - np.sum(zp * zp, axis=1), rtol=1e-14)

    def test_exponential_identity(self):
        # exp(d) rebuilt from (rho_l, rho_r, R)-data with f = |z-z'|^2/R^2
        rng = np.random.default_rng(7)
        z = rng.uniform(-0.9, 0.9, (400, 3))
        z = z[np.linalg.norm(z, axis=1) < 0.97]
        zp = z[::-1].copy()
        sep = np.linalg.norm(z - zp, axis=1)
        keep = sep > 1e-3
        z, zp = z[keep], zp[keep]
        t = boundary_triple(z, zp)
        f = np.sum((z - zp) ** 2, axis=1) / t.front**2
        ratio = f / (t.rho_l * t.rho_r)
        # exp(d) = cosh d + sqrt(cosh^2 d - 1) with cosh d = 1 + 2 f/(rho_l rho_r)
        rhs = 1.0 + 2.0 * ratio + 2.0 * np.sqrt(ratio * (1.0 + ratio))
        lhs = np.exp(dist0_closed(z, zp))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


class TestLogStructure:
    def test_diagonal_raises(self):
        with pytest.raises(SingularInputError):
            log_structure_F([0.2, 0, 0], [0.2, 0, 0])

    def test_bounded_along_radial_ray(self):
        zp = np.zeros(3)
        ts = 1.0 - np.geomspace(1e-8, 0.1, 40)
        vals = np.array([log_structure_F([t, 0, 0], zp) for t in ts])
        assert np.all(vals > 0)
        assert np.all(np.isfinite(vals))
        assert vals.max() < 10.0

    def test_bounded_antipodal(self):
        vals = []
        for depth in np.geomspace(1e-8, 0.1, 30):
            r = 1.0 - depth
            vals.append(log_structure_F([r, 0, 0], [-r, 0, 0]))
        vals = np.array(vals)
        assert np.all((vals > 0) & (vals < 10.0))

    def test_quadratic_vanishing_at_diagonal(self):
        z = np.array([0.5, 0.0, 0.0])
        eps = np.geomspace(1e-6, 1e-3, 12)
        f2 = np.array([log_structure_F(z, z + [0, e, 0]) ** 2 for e in eps])
        slope = np.polyfit(np.log(eps), np.log(f2), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.05)


class TestMobius:
    def test_translation_moves_origin(self):
        a = np.array([0.3, -0.1, 0.2])
        np.testing.assert_allclose(mobius_translate(a, np.zeros(3)), a, atol=1e-15)

    def test_isometry(self):
        rng = np.random.default_rng(3)
        a = np.array([0.25, 0.1, -0.3])
        x = rng.uniform(-0.4, 0.4, (20, 3))
        y = rng.uniform(-0.4, 0.4, (20, 3))
        np.testing.assert_allclose(
            dist0_closed(mobius_translate(a, x), mobius_translate(a, y)),
            dist0_closed(x, y),
            rtol=1e-11,
        )

    def test_log_map_norm(self):
        rng = np.random.default_rng(4)
        z = rng.uniform(-0.5, 0.5, (30, 3))
        zp = rng.uniform(-0.5, 0.5, (30, 3))
        w = log_map_ball(z, zp)
        g_norm = 2.0 / (1.0 - np.sum(z * z, axis=1)) * np.linalg.norm(w, axis=1)
        np.testing.assert_allclose(g_norm, dist0_closed(z, zp), rtol=1e-12)
