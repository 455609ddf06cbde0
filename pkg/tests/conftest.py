import numpy as np
import pytest

from volterra_lift.kernels import DiscreteMeasure, ExponentialSum, Gamma, discretize


@pytest.fixture
def exp_measure():
    return discretize(ExponentialSum((0.5, 2.0, 8.0), (1.0, 0.5, 0.25)), 1)


@pytest.fixture
def two_node_measure():
    return DiscreteMeasure(np.array([1.0, 3.0]), np.array([1.0, 0.5]))


@pytest.fixture(scope="session")
def gamma_measure():
    return discretize(Gamma(0.7, 1.0), 50, horizon=1.0)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def random_states(dm, gen, count, n=1):
    """Random lift-state values with per-state scales spread over a few decades."""
    scales = gen.lognormal(0.0, 1.0, size=(count, 1, 1))
    return gen.standard_normal((count, dm.size, n)) * scales
