import numpy as np
import pytest

from utils.models import MotorKind
from utils.powertrain import (
    DomainError,
    EfficiencyMap,
    PolynomialFitError,
    efficiency_at,
    efficiency_from_power,
    energy_consistent,
    electrical_power,
    fit_power_polynomial,
    generate_motor_map,
    max_torque_envelope,
)
from utils.schemas import MotorSpec, default_front_motor, default_rear_motor


def _spec(**overrides):
    values = dict(kind=MotorKind.IM, T_stall=220.0, P_rated=150_000.0, c0=100.0, c1=1.0, c2=0.001, c3=0.1, c4=0.02)
    values.update(overrides)
    return MotorSpec(**values)


def _exact(omega, torque):
    return 1000.0 + 3.0 * omega + 0.5 * torque + 0.01 * omega * torque + 1e-4 * torque ** 2 + 2e-6 * omega ** 3


@pytest.fixture
def exact_map():
    omega = np.arange(0.0, 101.0, 10.0)
    torque = np.arange(-50.0, 51.0, 5.0)
    W, T = np.meshgrid(omega, torque, indexing="ij")
    return EfficiencyMap.from_power(omega, torque, _exact(W, T), kind="exact")


class TestEfficiency:
    def test_propelling(self):
        assert efficiency_from_power(200.0, 100.0, 22_222.0) == pytest.approx(0.90, abs=1e-4)

    def test_regenerating(self):
        assert efficiency_from_power(200.0, -100.0, -18_000.0) == pytest.approx(0.90)

    def test_undefined_at_zero_shaft_power(self):
        assert np.isnan(efficiency_from_power(0.0, 100.0, 500.0))
        assert np.isnan(efficiency_from_power(200.0, 0.0, 500.0))

    def test_undefined_when_losses_exceed_regen(self):
        assert np.isnan(efficiency_from_power(10.0, -1.0, 50.0))

    def test_regen_points_never_recover_more_than_the_shaft_gives(self):
        m = generate_motor_map(default_front_motor())
        i = np.flatnonzero(m.omega_grid == 10.0)[0]
        j = np.flatnonzero(m.torque_grid == -5.0)[0]
        assert m.p_elec[i, j] > 0
        assert not m.energy_consistent()[i, j]
        assert np.isnan(m.eta[i, j])

        for m in (generate_motor_map(default_front_motor()), generate_motor_map(default_rear_motor())):
            W, T = np.meshgrid(m.omega_grid, m.torque_grid, indexing="ij")
            regen = np.isfinite(m.eta) & (W * T < 0)
            assert regen.any()
            assert np.all(np.abs(m.p_elec[regen]) <= np.abs(W * T)[regen])
            assert np.all(m.energy_consistent()[np.isfinite(m.eta)])

    def test_consistency_mask(self):
        assert energy_consistent(-50.0, -40.0)
        assert not energy_consistent(-50.0, 120.0)
        assert not energy_consistent(-50.0, -60.0)
        assert energy_consistent(0.0, 150.0)
        assert not energy_consistent(100.0, 90.0)


class TestEnvelope:
    def test_stall_region(self):
        assert max_torque_envelope(_spec(), 0.0) == 220.0

    def test_constant_power_region(self):
        assert max_torque_envelope(_spec(), 1000.0) == pytest.approx(150.0)

    def test_non_increasing(self):
        env = max_torque_envelope(_spec(), np.linspace(0, 1400, 300))
        assert np.all(np.diff(env) <= 0)

    def test_speed_outside_range(self):
        with pytest.raises(DomainError):
            max_torque_envelope(_spec(), 1500.0)
        with pytest.raises(DomainError):
            max_torque_envelope(_spec(), -1.0)


class TestMotorMaps:
    def test_generation_is_deterministic(self):
        a = generate_motor_map(default_front_motor())
        b = generate_motor_map(default_front_motor())
        np.testing.assert_array_equal(a.p_elec, b.p_elec)
        np.testing.assert_array_equal(a.eta, b.eta)

    def test_efficiency_below_one(self):
        eta = generate_motor_map(default_rear_motor()).eta
        assert np.nanmax(eta) < 1.0

    def test_zero_torque_column_has_no_efficiency(self):
        m = generate_motor_map(default_front_motor())
        column = np.flatnonzero(m.torque_grid == 0.0)[0]
        assert np.all(np.isnan(m.eta[:, column]))

    def test_pmsm_beats_im_at_part_load(self):
        front, rear = default_front_motor(), default_rear_motor()
        assert efficiency_at(front, 300.0, 100.0) == pytest.approx(0.914, abs=1e-3)
        assert efficiency_at(rear, 300.0, 100.0) == pytest.approx(0.945, abs=1e-3)
        W, T = np.meshgrid(np.linspace(100, 500, 9), np.linspace(20, 0.8 * 240, 9))
        assert np.all(efficiency_at(rear, W, T) > efficiency_at(front, W, T))

    def test_csv_round_trip(self, tmp_path):
        m = generate_motor_map(default_rear_motor())
        m.save_csv(tmp_path / "map.csv")
        loaded = EfficiencyMap.load_csv(tmp_path / "map.csv")
        np.testing.assert_array_equal(loaded.omega_grid, m.omega_grid)
        np.testing.assert_array_equal(loaded.torque_grid, m.torque_grid)
        np.testing.assert_array_equal(loaded.p_elec, m.p_elec)
        np.testing.assert_array_equal(loaded.eta, m.eta)

    def test_lookup_outside_grid(self):
        m = generate_motor_map(default_rear_motor())
        assert m.power_at(m.omega_grid[3], m.torque_grid[5]) == pytest.approx(m.p_elec[3, 5])
        with pytest.raises(DomainError):
            m.power_at(5000.0, 0.0)


class TestPolynomialFit:
    def test_default_maps_fit_within_two_percent(self, powertrain):
        for poly, m in ((powertrain.poly_f, powertrain.front_map), (powertrain.poly_r, powertrain.rear_map)):
            assert poly.rmse <= 0.02 * np.max(np.abs(m.p_elec))
            assert len(poly.coeffs) == 21

    def test_polynomial_tracks_the_map(self, powertrain):
        m = powertrain.rear_map
        rng = np.random.default_rng(3)
        omega = rng.uniform(m.omega_grid[0], m.omega_grid[-1], 1000)
        torque = rng.uniform(m.torque_grid[0], m.torque_grid[-1], 1000)
        diff = powertrain.poly_r.evaluate(omega, torque) - m.power_at(omega, torque)
        assert np.sqrt(np.mean(diff ** 2)) <= 2.0 * powertrain.poly_r.rmse + 1.0

    def test_exact_polynomial_is_recovered(self, exact_map):
        poly = fit_power_polynomial(exact_map)
        rng = np.random.default_rng(11)
        omega = rng.uniform(0, 100, 50)
        torque = rng.uniform(-50, 50, 50)
        np.testing.assert_allclose(poly.evaluate(omega, torque), _exact(omega, torque), rtol=1e-8)

    def test_fit_ignores_row_order(self, exact_map):
        shuffled = exact_map.to_frame().sample(frac=1.0, random_state=5)
        a = fit_power_polynomial(exact_map)
        b = fit_power_polynomial(EfficiencyMap.from_frame(shuffled))
        np.testing.assert_allclose(a.coeffs, b.coeffs, rtol=1e-9, atol=1e-9)

    def test_one_signed_torque_grid(self):
        omega = np.arange(0.0, 101.0, 10.0)
        torque = np.arange(0.0, 51.0, 5.0)
        W, T = np.meshgrid(omega, torque, indexing="ij")
        with pytest.raises(PolynomialFitError):
            fit_power_polynomial(EfficiencyMap.from_power(omega, torque, _exact(W, T)))

    def test_too_few_points(self):
        omega = np.array([0.0, 50.0, 100.0])
        torque = np.array([-5.0, 0.0, 5.0])
        W, T = np.meshgrid(omega, torque, indexing="ij")
        with pytest.raises(PolynomialFitError):
            fit_power_polynomial(EfficiencyMap.from_power(omega, torque, _exact(W, T)))

    def test_evaluation_outside_domain(self, powertrain):
        with pytest.raises(DomainError):
            powertrain.poly_f.evaluate(2000.0, 0.0)

    def test_derivatives_match_finite_differences(self, powertrain):
        poly = powertrain.poly_f
        w, T, h = 420.0, 35.0, 1e-3
        dw, dT = poly.gradient(w, T)
        assert dw == pytest.approx((poly(w + h, T) - poly(w - h, T)) / (2 * h), rel=1e-5)
        assert dT == pytest.approx((poly(w, T + h) - poly(w, T - h)) / (2 * h), rel=1e-5)
        hww, hwT, hTT = poly.hessian(w, T)
        assert hwT == pytest.approx((poly.gradient(w, T + h)[0] - poly.gradient(w, T - h)[0]) / (2 * h),
                                    rel=1e-4, abs=1e-6)
        assert hTT == pytest.approx((poly.gradient(w, T + h)[1] - poly.gradient(w, T - h)[1]) / (2 * h),
                                    rel=1e-4, abs=1e-6)
        assert hww == pytest.approx((poly.gradient(w + h, T)[0] - poly.gradient(w - h, T)[0]) / (2 * h),
                                    rel=1e-4, abs=1e-6)


def test_both_motors_regenerate_when_braking(powertrain, vehicle):
    P = electrical_power(powertrain.poly_f, powertrain.poly_r, -100.0, -100.0, 10.0, vehicle)
    assert P < 0.0
