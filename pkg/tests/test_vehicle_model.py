import numpy as np
import pytest

from utils.schemas import VehicleParams
from utils.vehicle_model import acceleration_from_torque, motor_speed, resistive_forces, torque_from_acceleration


def test_wind_coefficient_is_derived(vehicle):
    assert vehicle.k_w == pytest.approx(0.306 * 1.205 * 2.2)
    with pytest.raises(Exception):
        VehicleParams(k_w=1.0)


def test_aero_force_at_20_mps(vehicle):
    load = resistive_forces(20.0, 0.0, vehicle)
    assert load.F_a == pytest.approx(162.2, abs=0.05)
    assert load.F_g == 0.0
    assert load.F_r == pytest.approx(0.009 * 1780 * 9.81)


def test_grade_force_on_5_percent_rad(vehicle):
    load = resistive_forces(0.0, 0.05, vehicle)
    assert load.F_g == pytest.approx(872.7, abs=0.05)
    assert load.total == pytest.approx(load.F_g + load.F_r + load.F_a)


def test_acceleration_from_standstill(vehicle):
    assert acceleration_from_torque(200.0, 0.0, 0.0, 0.0, vehicle) == pytest.approx(2.486, abs=5e-4)


def test_brake_force_always_decelerates(vehicle):
    free = acceleration_from_torque(50.0, 0.0, 10.0, 0.0, vehicle)
    braked = acceleration_from_torque(50.0, 1000.0, 10.0, 0.0, vehicle)
    assert braked == pytest.approx(free - 1000.0 / vehicle.m)


def test_torque_acceleration_round_trip(vehicle):
    rng = np.random.default_rng(7)
    a = rng.uniform(-3, 3, 200)
    v = rng.uniform(0, 20, 200)
    phi = rng.uniform(-0.05, 0.05, 200)
    F_b = rng.uniform(0, 2000, 200)
    T = torque_from_acceleration(a, v, phi, F_b, vehicle)
    np.testing.assert_allclose(acceleration_from_torque(T, F_b, v, phi, vehicle), a, atol=1e-12)


def test_motor_speed(vehicle):
    assert motor_speed(10.0, vehicle) == pytest.approx(229.1)
    np.testing.assert_allclose(motor_speed(np.array([0.0, 1.0]), vehicle), [0.0, vehicle.n])
