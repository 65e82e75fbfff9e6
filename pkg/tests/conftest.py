import numpy as np
import pytest

from popmap import SynthSpec, generate


@pytest.fixture(scope="session")
def world():
    """Default synthetic world. Treat as read-only across tests."""
    return generate(SynthSpec(seed=0))


@pytest.fixture(scope="session")
def tiny_world():
    """Small world for tests that train or sweep; read-only."""
    spec = SynthSpec(width=28, height=28, n_covariates=3, n_fine_regions=9,
                     n_coarse_regions=4, seed=1, n_building_blobs=3)
    return generate(spec)


def make_rng(*key):
    return np.random.default_rng(list(key))
