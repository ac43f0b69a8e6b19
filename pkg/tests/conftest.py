import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from accel_ergodic.core import PhaseGrid

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def desk():
    """d=1 desk grid: n_x=32, n_v=33, n_w=17, v_max=2, w_max=4, h=1/8."""
    return PhaseGrid()


@pytest.fixture(scope="session")
def small():
    return PhaseGrid(n_x=4, v_max=1.0, n_v=3, w_max=2.0, n_w=3, h=0.25)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
