import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from utils.mpc import VehicleSystem  # noqa: E402
from utils.schemas import BatteryParams, VehicleParams  # noqa: E402
from utils.traffic import Intersection, Scenario  # noqa: E402


@pytest.fixture(scope="session")
def system():
    """Default vehicle with both motor maps generated and fitted once per session."""
    return VehicleSystem.build()


@pytest.fixture(scope="session")
def powertrain(system):
    return system.powertrain


@pytest.fixture
def vehicle():
    return VehicleParams()


@pytest.fixture
def battery():
    return BatteryParams()


def make_scenario(v, dt=0.1, d0=0.0, intersections=(), name="test", v_max=20.0):
    """Scenario whose positions are the forward-Euler integral of ``v``."""
    v = np.asarray(v, dtype=float)
    t = np.arange(len(v)) * dt
    d = d0 + np.concatenate(([0.0], np.cumsum(v[:-1] * dt)))
    a = np.zeros_like(v)
    a[:-1] = np.diff(v) / dt
    return Scenario(t=t, d_p=d, v_p=v, a_p=a, intersections=tuple(intersections), v_max=v_max, name=name)


@pytest.fixture
def stationary_leader():
    """Preceding vehicle parked 80 m down the road for 5 s."""
    return make_scenario(np.zeros(51), d0=80.0, name="stationary")


@pytest.fixture
def signal():
    # red [0, 10), green [10, 40), red [40, 70), ...
    return Intersection("I1", 150.0, 60.0, ((10.0, 40.0),))
