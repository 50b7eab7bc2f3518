import numpy as np
import pandas as pd
import pytest

from conftest import make_scenario
from utils.baseline_metrics import (
    MetricError,
    SplitRatio,
    TorqueDemandError,
    ablation_energy,
    baseline_run,
    compute_r_m,
    compute_r_soc,
    optimal_split,
    rule_based_split,
    split_grid_oracle,
    summarize_pair,
)
from utils.models import MotorKind, RunMode, VehicleState
from utils.mpc import RUNLOG_COLUMNS, RunLog, summarize_run
from utils.powertrain import Powertrain
from utils.schemas import MotorSpec


@pytest.fixture
def narrow_front(powertrain):
    """Front motor limited to 200 N*m, rear to 350 N*m; the fitted polynomials are reused."""
    front = MotorSpec(kind=MotorKind.IM, T_stall=200.0, P_rated=150_000.0, c0=150.0, c1=1.5, c2=0.0015,
                      c3=0.12, c4=0.03)
    rear = MotorSpec(kind=MotorKind.PMSM, T_stall=350.0, P_rated=120_000.0, c0=100.0, c1=0.6, c2=0.0008,
                     c3=0.08, c4=0.02)
    return Powertrain(front, rear, powertrain.poly_f, powertrain.poly_r)


class TestRuleBasedSplit:
    def test_even_split(self, powertrain):
        assert rule_based_split(300.0, SplitRatio(1, 1), 100.0, powertrain) == (150.0, 150.0)

    def test_overflow_moves_to_the_other_motor(self, narrow_front):
        assert rule_based_split(500.0, SplitRatio(1, 1), 100.0, narrow_front) == (200.0, 300.0)

    def test_braking_split(self, powertrain):
        assert rule_based_split(-200.0, SplitRatio(1, 1), 100.0, powertrain) == (-100.0, -100.0)

    def test_uneven_ratio(self, powertrain):
        T_f, T_r = rule_based_split(100.0, SplitRatio(3, 1), 100.0, powertrain)
        assert (T_f, T_r) == pytest.approx((75.0, 25.0))

    def test_demand_beyond_both_motors(self, powertrain):
        with pytest.raises(TorqueDemandError):
            rule_based_split(600.0, SplitRatio(1, 1), 100.0, powertrain)

    def test_ratio_validation(self):
        with pytest.raises(ValueError):
            SplitRatio(0, 0)
        with pytest.raises(ValueError):
            SplitRatio(-1, 2)


def test_optimal_split_beats_grid_and_rule(powertrain):
    rng = np.random.default_rng(8)
    close_to_grid = 0
    no_worse_than_rule = 0
    n = 500
    for _ in range(n):
        omega = rng.uniform(0.0, 1000.0)
        f_max, r_max = (float(x) for x in powertrain.torque_limits(omega))
        T_d = rng.uniform(-(f_max + r_max), f_max + r_max)
        T_f, T_r, P = optimal_split(T_d, omega, powertrain)
        assert T_f + T_r == pytest.approx(T_d)
        assert T_f * T_r >= 0.0
        _, _, P_grid = split_grid_oracle(T_d, omega, powertrain)
        close_to_grid += P <= P_grid + 0.02 * abs(P_grid) + 1.0
        P_rule = float(powertrain.power(*rule_based_split(T_d, SplitRatio(1, 1), omega, powertrain), omega))
        no_worse_than_rule += P <= P_rule + 1e-6 * max(1.0, abs(P_rule))
    assert close_to_grid >= 0.95 * n
    assert no_worse_than_rule >= 0.95 * n


class TestMetrics:
    def test_r_soc(self):
        assert compute_r_soc(0.78, 0.75, 0.8) == pytest.approx(60.0)
        assert compute_r_soc(0.75, 0.75, 0.8) == 0.0
        assert compute_r_soc(0.72, 0.75, 0.8) < 0.0

    def test_r_soc_undefined(self):
        with pytest.raises(MetricError):
            compute_r_soc(0.8, 0.8, 0.8)

    def test_r_m(self):
        assert compute_r_m(10.0, 9.6) == pytest.approx(4.0)

    def test_r_m_undefined(self):
        with pytest.raises(MetricError):
            compute_r_m(0.0, 1.0)

    def test_summarize_pair(self):
        optimal = {"scenario": "s", "final_soc": 0.78, "initial_soc": 0.8, "duration": 10.0, "solve_time_mean": 0.2}
        baseline = {"scenario": "s", "final_soc": 0.75, "initial_soc": 0.8, "duration": 10.0}
        row = summarize_pair(optimal, baseline, R_m=4.0)
        assert row["R_SOC"] == pytest.approx(60.0)
        assert row["R_m"] == 4.0
        assert np.isnan(summarize_pair(optimal, baseline)["R_m"])
        assert row["clamped_steps_preceding"] == 0
        assert summarize_pair(optimal, {**baseline, "clamped_steps": 7})["clamped_steps_preceding"] == 7


class TestBaselineRun:
    def test_parked_vehicle_only_idles(self, system):
        log = baseline_run(make_scenario(np.zeros(21)), system)
        assert (log.frame[["T_f", "T_r", "F_b"]] == 0.0).all().all()
        assert log.mode is RunMode.BASELINE
        assert len(log.frame) == 20
        idle = float(log.frame["P_bat"].iloc[0])
        assert np.allclose(log.frame["P_bat"], idle)

    def test_mild_deceleration_uses_regen_only(self, system):
        log = baseline_run(make_scenario(15.0 - 0.05 * np.arange(101)), system)
        assert (log.frame["F_b"] == 0.0).all()
        assert (log.frame["T_f"].iloc[:-1] < 0.0).all()

    def test_hard_braking_uses_friction(self, system):
        log = baseline_run(make_scenario(np.maximum(15.0 - 0.9 * np.arange(21), 0.0)), system)
        assert log.frame["F_b"].max() > 0.0
        assert (log.frame["F_b"] >= 0.0).all()

    def test_repeatable(self, system):
        scenario = make_scenario(10.0 + np.sin(np.arange(101) / 10.0))
        a = baseline_run(scenario, system)
        b = baseline_run(scenario, system)
        pd.testing.assert_frame_equal(a.frame, b.frame)
        assert a.final_soc == b.final_soc

    def test_cruising_drains_the_battery(self, system):
        log = baseline_run(make_scenario(np.full(101, 15.0)), system, initial_soc=0.9)
        assert log.final_soc < 0.9
        assert log.final_state.d == pytest.approx(150.0)

    def test_no_clamping_within_limits(self, system):
        log = baseline_run(make_scenario(np.full(101, 15.0)), system)
        assert log.clamped_steps == 0
        assert summarize_run(log)["clamped_steps"] == 0

    def test_battery_power_clamps_are_counted(self, system):
        # 0.1% of the discharge limit is below the idle draw of both motors
        log = baseline_run(make_scenario(np.full(101, 15.0)), system, power_fraction=1e-3)
        limit = 1e-3 * system.battery.max_discharge_power
        assert log.clamped_steps == 100
        assert log.config["power_clamped_steps"] == 100
        assert log.config["torque_clamped_steps"] == 0
        np.testing.assert_allclose(log.frame["P_bat"], limit)
        assert summarize_run(log)["clamped_steps"] == 100


def test_even_split_log_has_no_ablation_gain(system):
    pt = system.powertrain
    v = np.full(10, 12.0)
    omega = system.vehicle.n * v
    T_f = np.full(10, 40.0)
    P = pt.power(T_f, T_f, omega)
    frame = pd.DataFrame({c: np.zeros(10) for c in RUNLOG_COLUMNS})
    frame["v"], frame["T_f"], frame["T_r"], frame["P_bat"] = v, T_f, T_f, P
    log = RunLog(frame, VehicleState(12.0, 12.0, 0.79), "s", RunMode.OPTIMAL, 0.1, 0.8)
    result = ablation_energy(log, system)
    assert result["R_m"] == pytest.approx(0.0, abs=1e-9)
    assert result["energy_rule_J"] == pytest.approx(result["energy_opt_J"])
