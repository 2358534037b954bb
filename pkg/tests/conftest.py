import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hgms import testbed as tb

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def circle():
    return tb.make_circle_kink()


@pytest.fixture(scope="session")
def degenerate():
    return tb.make_degenerate_circle()


@pytest.fixture(scope="session")
def sphere3():
    return tb.make_sphere(3)


@pytest.fixture(scope="session")
def singleton():
    return tb.make_singleton()


@pytest.fixture(scope="session")
def all_problems():
    return [
        tb.make_circle_kink(),
        tb.make_degenerate_circle(),
        tb.make_sphere(3),
        tb.make_sphere(4),
        tb.make_singleton(),
        tb.make_singleton(np.array([[2.0, 0.0], [0.0, 1.0]])),
    ]
