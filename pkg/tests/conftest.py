import numpy as np
import pytest

from hypres import desitter, metrics, radial


@pytest.fixture(scope="session")
def model():
    return desitter.DSSModel.create(1.0, 0.1, n=2)


@pytest.fixture(scope="session")
def grids(model):
    """Tortoise grids for ell = 0, 1, 2, shared across radial/acceptance tests."""
    return {ell: radial.tortoise(model, ell) for ell in (0, 1, 2)}


@pytest.fixture(scope="session")
def spec_hyp():
    return metrics.MetricSpec(n=2)


@pytest.fixture(scope="session")
def spec_w():
    """Unperturbed metric with a nonzero smooth potential."""
    return metrics.MetricSpec(n=2, W=metrics.scalar_field("gaussian", amp=2.0, width=0.8))


@pytest.fixture(scope="session")
def spec_pert():
    """Collar-perturbed metric (delta = 0.1) with potential."""
    return metrics.MetricSpec(
        n=2,
        delta=0.1,
        H=metrics.tensor_field("off_bump", amp=0.15),
        W=metrics.scalar_field("gaussian", amp=2.0, width=0.8),
    )


def fit_loglog(x, y):
    return float(np.polyfit(np.log(np.asarray(x)), np.log(np.asarray(y)), 1)[0])
