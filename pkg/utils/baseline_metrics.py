"""Rule-based torque split, the preceding-vehicle baseline and the benefit metrics."""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from utils.battery import battery_current, soc_step
from utils.models import RunMode, VehicleState
from utils.mpc import RUNLOG_COLUMNS, RunLog, VehicleSystem
from utils.powertrain import Powertrain
from utils.traffic import Scenario
from utils.vehicle_model import motor_speed, torque_from_acceleration

logger = logging.getLogger(__name__)

SPLIT_TOL = 1e-9


class TorqueDemandError(ValueError):
    def __init__(self, T_d: float, limit: float):
        self.T_d = T_d
        self.limit = limit
        super().__init__(f"torque demand {T_d:.1f} N*m exceeds combined envelope {limit:.1f} N*m")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class SplitRatio:
    N_f: float = 1.0
    N_r: float = 1.0

    def __post_init__(self):
        if self.N_f < 0 or self.N_r < 0 or self.N_f + self.N_r <= 0:
            raise ValueError("split ratio needs non-negative parts with a positive sum")

    @property
    def front_share(self) -> float:
        return self.N_f / (self.N_f + self.N_r)


def rule_based_split(T_d: float, ratio: SplitRatio, omega: float, powertrain: Powertrain) -> Tuple[float, float]:
    """Fixed-ratio split; torque above one motor's envelope moves to the other."""
    f_max, r_max = powertrain.torque_limits(omega)
    f_max, r_max = float(f_max), float(r_max)
    limit = f_max + r_max
    if abs(T_d) > limit * (1.0 + SPLIT_TOL):
        raise TorqueDemandError(T_d, limit)
    T_f = ratio.front_share * T_d
    T_r = T_d - T_f
    if abs(T_f) > f_max:
        T_f = np.sign(T_f) * f_max
        T_r = T_d - T_f
    elif abs(T_r) > r_max:
        T_r = np.sign(T_r) * r_max
        T_f = T_d - T_r
    return float(T_f), float(T_r)


def _same_sign_interval(T_d: float, f_max: float, r_max: float) -> Tuple[float, float]:
    """Front torques that keep both motors on the sign of T_d within their envelopes."""
    if T_d >= 0:
        return max(0.0, T_d - r_max), min(f_max, T_d)
    return max(-f_max, T_d), min(0.0, T_d + r_max)


def optimal_split(T_d: float, omega: float, powertrain: Powertrain) -> Tuple[float, float, float]:
    """Split minimizing polynomial electrical power; returns (T_f, T_r, P)."""
    f_max, r_max = (float(x) for x in powertrain.torque_limits(omega))
    if abs(T_d) > (f_max + r_max) * (1.0 + SPLIT_TOL):
        raise TorqueDemandError(T_d, f_max + r_max)
    lo, hi = _same_sign_interval(T_d, f_max, r_max)

    def power(T_f):
        return float(powertrain.power(T_f, T_d - T_f, omega))

    candidates = [lo, hi]
    if hi - lo > 1e-9:
        res = minimize_scalar(power, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
        candidates.append(float(res.x))
    best = min(candidates, key=power)
    return best, T_d - best, power(best)


def split_grid_oracle(T_d: float, omega: float, powertrain: Powertrain, step: float = 1.0) -> Tuple[float, float, float]:
    """Brute-force split over a ``step`` N*m grid of front torques."""
    f_max, r_max = (float(x) for x in powertrain.torque_limits(omega))
    lo, hi = _same_sign_interval(T_d, f_max, r_max)
    grid = np.append(np.arange(lo, hi, step), hi)
    p = powertrain.power(grid, T_d - grid, np.full_like(grid, omega))
    i = int(np.argmin(p))
    return float(grid[i]), float(T_d - grid[i]), float(p[i])


def baseline_run(scenario: Scenario, system: VehicleSystem, ratio: Optional[SplitRatio] = None,
                 initial_soc: float = 0.8, power_fraction: float = 0.95) -> RunLog:
    """Replay the preceding vehicle through the shared powertrain with a fixed split.

    The friction brake only takes what the motors cannot regenerate; a
    vehicle standing still draws no traction torque.
    """
    ratio = ratio or SplitRatio()
    p, pt, battery = system.vehicle, system.powertrain, system.battery
    dt = scenario.dt
    p_limit = power_fraction * battery.max_discharge_power
    soc = initial_soc
    rows = []
    torque_clamps = power_clamps = clamped = 0
    for k in range(len(scenario) - 1):
        t, d, v, a = (float(x[k]) for x in (scenario.t, scenario.d_p, scenario.v_p, scenario.a_p))
        battery = system.bms(t, battery)
        phi = float(scenario.grade(d))
        omega = min(motor_speed(v, p), pt.omega_max)
        f_max, r_max = (float(x) for x in pt.torque_limits(omega))
        limit = f_max + r_max
        if v <= 0.0 and a <= 0.0:
            T_need = 0.0
        else:
            T_need = torque_from_acceleration(a, v, phi, 0.0, p)
        F_b = 0.0
        T_d = T_need
        torque_clamped = power_clamped = False
        if T_d < -limit:
            T_d = -limit
            F_b = p.n * (T_d - T_need)
        elif T_d > limit:
            torque_clamped = True
            T_d = limit
        T_f, T_r = rule_based_split(T_d, ratio, omega, pt)
        P_bat = float(pt.power(T_f, T_r, omega))
        if P_bat > p_limit:
            power_clamped = True
            P_bat = p_limit
        torque_clamps += torque_clamped
        power_clamps += power_clamped
        clamped += torque_clamped or power_clamped
        current = battery_current(P_bat, battery)
        rows.append({
            "t": t, "d": d, "v": v, "soc": soc, "a": a, "T_f": T_f, "T_r": T_r, "P_bat": P_bat,
            "F_b": F_b, "s1": 0.0, "s2": 0.0, "d_p": d, "v_p": v, "gap": np.nan,
            "intersection": "", "signal_mode": "free", "solver_status": "", "solve_time": np.nan,
            "iterations": np.nan, "fallback": "",
        })
        soc = soc_step(soc, current, dt, battery)
    if clamped:
        logger.warning("baseline on %s: %d steps clamped (%d torque, %d battery power)",
                       scenario.name, clamped, torque_clamps, power_clamps)
    final = VehicleState(float(scenario.d_p[-1]), float(scenario.v_p[-1]), soc)
    return RunLog(pd.DataFrame(rows, columns=RUNLOG_COLUMNS), final, scenario.name, RunMode.BASELINE, dt,
                  initial_soc, {"split_front": ratio.N_f, "split_rear": ratio.N_r,
                                "torque_clamped_steps": torque_clamps, "power_clamped_steps": power_clamps},
                  clamped_steps=clamped)


def rule_based_resimulation(log: RunLog, system: VehicleSystem, ratio: Optional[SplitRatio] = None) -> float:
    """Energy (J) of the logged speed profile when its total torque is split by the fixed rule."""
    ratio = ratio or SplitRatio()
    p, pt = system.vehicle, system.powertrain
    energy = 0.0
    for v, T_f, T_r in log.frame[["v", "T_f", "T_r"]].itertuples(index=False):
        omega = min(motor_speed(v, p), pt.omega_max)
        T_f_rule, T_r_rule = rule_based_split(T_f + T_r, ratio, omega, pt)
        energy += float(pt.power(T_f_rule, T_r_rule, omega)) * log.dt
    return energy


def compute_r_soc(soc_e: float, soc_p: float, soc_0: float) -> float:
    """Relative SOC improvement of the ego over the preceding vehicle, percent."""
    denominator = soc_0 - soc_p
    if abs(denominator) < 1e-12:
        raise MetricError("preceding vehicle consumed no charge; R_SOC is undefined")
    return (soc_e - soc_p) / denominator * 100.0


def compute_r_m(P_rule: float, P_opt: float) -> float:
    """Relative energy saving of the co-optimized split over the fixed rule, percent."""
    if P_rule == 0:
        raise MetricError("rule-based energy is zero; R_m is undefined")
    return (P_rule - P_opt) / P_rule * 100.0


def ablation_energy(log: RunLog, system: VehicleSystem, ratio: Optional[SplitRatio] = None) -> Dict[str, float]:
    E_opt = log.energy()
    E_rule = rule_based_resimulation(log, system, ratio)
    return {"energy_opt_J": E_opt, "energy_rule_J": E_rule, "R_m": compute_r_m(E_rule, E_opt)}


def summarize_pair(optimal: Dict, baseline: Dict, R_m: Optional[float] = None) -> Dict:
    """One table row comparing an optimal run with the baseline on the same scenario."""
    return {
        "scenario": optimal["scenario"],
        "R_SOC": compute_r_soc(optimal["final_soc"], baseline["final_soc"], optimal["initial_soc"]),
        "R_m": R_m if R_m is not None else optimal.get("R_m", np.nan),
        "solve_time_mean": optimal.get("solve_time_mean", np.nan),
        "duration": optimal["duration"],
        "final_soc_ego": optimal["final_soc"],
        "final_soc_preceding": baseline["final_soc"],
        "clamped_steps_preceding": baseline.get("clamped_steps", 0),
    }
