import numpy as np
import pytest

from hypres.errors import DomainError, ModelValidityError
from hypres.metrics import (
    GammaApplicator,
    MetricSpec,
    boundary_x,
    chi_profile,
    christoffel,
    christoffel_bundle,
    load_scalar_table,
    load_tensor_table,
    metric_eval,
    metric_matrix,
    scalar_field,
    tensor_field,
)


def test_chi_profile_plateaus():
    assert chi_profile(0.3) == 1.0
    assert chi_profile(-0.49) == 1.0
    assert chi_profile(1.2) == 0.0
    mid = chi_profile(np.linspace(0.55, 0.95, 50))
    assert np.all((mid > 0) & (mid < 1))
    assert np.all(np.diff(mid) <= 0)  # monotone through the transition
    assert mid[0] > 0.9 and mid[-1] < 0.1


def test_metric_at_center_is_4id():
    spec = MetricSpec(n=2)
    np.testing.assert_allclose(metric_eval(spec, np.zeros(3)), 4.0 * np.eye(3), rtol=1e-15)


def test_perturbation_vanishes_outside_collar():
    spec = MetricSpec(n=2, delta=0.1, H=tensor_field("round_bump", amp=0.5))
    z = np.array([0.4, 0.2, -0.1])  # 1-|z| > delta
    g0 = metric_matrix(MetricSpec(n=2), z)
    np.testing.assert_array_equal(metric_matrix(spec, z), g0)


def test_zero_perturbation_any_delta():
    spec = MetricSpec(n=2, delta=0.1, H=tensor_field("zero"))
    rng = np.random.default_rng(0)
    z = rng.uniform(-0.57, 0.57, (20, 3))
    np.testing.assert_array_equal(metric_matrix(spec, z), metric_matrix(MetricSpec(n=2), z))


def test_spd_validation():
    spec = MetricSpec(n=2, delta=0.2, H=tensor_field("round_bump", amp=-4e4))
    z = 0.92 * np.array([1.0, 0.0, 0.0])
    with pytest.raises(ModelValidityError):
        metric_eval(spec, z)


def test_metric_eval_rejects_exterior():
    with pytest.raises(DomainError):
        metric_eval(MetricSpec(n=2), np.array([1.1, 0, 0]))


def test_unknown_field_names():
    with pytest.raises(DomainError):
        scalar_field("nope")
    with pytest.raises(DomainError):
        tensor_field("nope")


@pytest.mark.parametrize("delta,h_name", [(0.0, "zero"), (0.3, "off_bump")])
def test_christoffel_against_directional_fd(delta, h_name):
    spec = MetricSpec(n=2, delta=delta, H=tensor_field(h_name, amp=0.2))
    rng = np.random.default_rng(5)
    z = rng.standard_normal((40, 3))
    z = z / np.linalg.norm(z, axis=1, keepdims=True) * rng.uniform(0.3, 0.9, (40, 1))
    y = rng.standard_normal((40, 3))
    eps = 1e-6
    gam, (dgam,) = christoffel_bundle(spec, z, dirs=(y,))
    fd = (christoffel(spec, z + eps * y) - christoffel(spec, z - eps * y)) / (2 * eps)
    scale = max(1.0, np.max(np.abs(dgam)))
    assert np.max(np.abs(dgam - fd)) < 2e-7 * scale


def test_applicator_matches_bundle():
    spec = MetricSpec(
        n=2, delta=0.3, H=tensor_field("off_bump", amp=0.2), W=scalar_field("gaussian")
    )
    rng = np.random.default_rng(6)
    z = rng.standard_normal((60, 3))
    z = z / np.linalg.norm(z, axis=1, keepdims=True) * rng.uniform(0.2, 0.92, (60, 1))
    u, s, y = (rng.standard_normal((60, 3)) for _ in range(3))
    app = GammaApplicator(spec, z)
    gam, (dgam,) = christoffel_bundle(spec, z, dirs=(y,))
    np.testing.assert_allclose(
        app.gamma_apply(u, s), np.einsum("bkij,bi,bj->bk", gam, u, s), atol=1e-12
    )
    np.testing.assert_allclose(
        app.dgamma_apply(y, u, s), np.einsum("bkij,bi,bj->bk", dgam, u, s), atol=1e-10
    )
    np.testing.assert_allclose(
        app.metric_dot(u, s),
        np.einsum("bij,bi,bj->b", metric_matrix(spec, z), u, s),
        atol=1e-12,
    )


def test_tensor_field_grad_hess():
    h = tensor_field("round_bump", amp=0.3, iso=1.0, rad=0.5)
    rng = np.random.default_rng(7)
    z = rng.uniform(-0.5, 0.5, (10, 3))
    eps = 1e-6
    g_fd = np.empty((10, 3, 3, 3))
    for m in range(3):
        e = np.zeros(3)
        e[m] = eps
        g_fd[:, m] = (h(z + e) - h(z - e)) / (2 * eps)
    np.testing.assert_allclose(h.grad(z), g_fd, atol=1e-9)


def test_boundary_x():
    assert boundary_x(np.zeros(3)) == 1.0
    z = np.array([0.5, 0, 0])
    assert boundary_x(z) == pytest.approx((1 - 0.5) / (1 + 0.5))


def _write_table(path, dim, shape, values):
    with open(path, "w") as fh:
        fh.write("# tabulated field\n")
        fh.write(f"{dim} {' '.join(str(s) for s in shape)} {values.shape[1]}\n")
        for row in values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def test_tabulated_scalar_roundtrip(tmp_path):
    shape = (9, 9, 9)
    axes = [np.linspace(-1, 1, m) for m in shape]
    zz = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.exp(-np.sum(zz * zz, axis=1))[:, None]
    path = tmp_path / "w.dat"
    _write_table(path, 3, shape, vals)
    fld = load_scalar_table(path)
    z = np.array([[0.11, -0.2, 0.3], [0.0, 0.0, 0.0]])
    np.testing.assert_allclose(fld(z), np.exp(-np.sum(z * z, axis=1)), atol=2e-4)


def test_tabulated_tensor_symmetry(tmp_path):
    shape = (7, 7, 7)
    axes = [np.linspace(-1, 1, m) for m in shape]
    zz = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    w = np.exp(-np.sum(zz * zz, axis=1))
    comps = np.stack([w, 0.1 * w, 0.2 * w, 0.9 * w, -0.1 * w, 1.1 * w], axis=1)
    path = tmp_path / "h.dat"
    _write_table(path, 3, shape, comps)
    fld = load_tensor_table(path)
    vals = fld(np.array([[0.2, 0.1, -0.3]]))
    np.testing.assert_allclose(vals, np.swapaxes(vals, -1, -2), atol=1e-15)
