import numpy as np
import pytest

from antianneal.mixture import MixtureModel


def random_spd(rng, d, scale=1.0):
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T / d + 0.5 * np.eye(d))


def random_model(rng, K, d, spread=3.0):
    w = rng.dirichlet(np.full(K, 2.0))
    means = rng.normal(scale=spread, size=(K, d))
    covs = np.array([random_spd(rng, d) for _ in range(K)])
    return MixtureModel(w, means, covs)


def two_component(alpha1, mu1, mu2, var):
    return MixtureModel([alpha1, 1 - alpha1], [[mu1], [mu2]], [[[var]], [[var]]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
