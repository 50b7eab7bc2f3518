"""Receding-horizon closed loop around the eco-driving OCP.

Every update interval the controller reads the plant state and the BMS
parameters, fetches (and optionally perturbs) the preceding-vehicle
prediction, chooses signal modes, builds and solves the OCP warm-started from
the previous plan, then applies the first interval of controls to the plant
in dt substeps. The plant is the controller's own forward-Euler model.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from utils.battery import BmsHook, battery_current, constant_bms, soc_step
from utils.models import Control, RunMode, SignalMode, SolverStatus, VehicleState
from utils.nlp_solver import solve
from utils.ocp import (
    BRAKE_SCALE,
    DISTANCE_SCALE,
    ENVELOPE_ROW_SCALE,
    POWER_SCALE,
    SLIP_ROW_SCALE,
    TORQUE_SCALE,
    DecisionVector,
    SignalConstraint,
    build_ocp,
    plan_signal_constraints,
    warm_start,
)
from utils.powertrain import Powertrain, build_powertrain
from utils.schemas import BatteryParams, MotorSpec, MpcConfig, OcpConfig, VehicleParams
from utils.schemas import default_front_motor, default_rear_motor
from utils.traffic import Scenario, perturb_prediction, predict_preceding
from utils.vehicle_model import acceleration_from_torque, motor_speed

logger = logging.getLogger(__name__)

RUNLOG_COLUMNS = [
    "t", "d", "v", "soc", "a", "T_f", "T_r", "P_bat", "F_b", "s1", "s2",
    "d_p", "v_p", "gap", "intersection", "signal_mode", "solver_status",
    "solve_time", "iterations", "fallback",
]
AUDIT_TOL = 1e-6


class CollisionError(RuntimeError):
    """The ego vehicle reached the preceding vehicle."""

    def __init__(self, t: float, gap: float):
        self.t = t
        self.gap = gap
        super().__init__(f"collision at t={t:.2f} s (gap {gap:.3f} m)")


@dataclass(frozen=True)
class VehicleSystem:
    vehicle: VehicleParams
    battery: BatteryParams
    powertrain: Powertrain
    bms: BmsHook = constant_bms

    @classmethod
    def build(cls, vehicle: Optional[VehicleParams] = None, battery: Optional[BatteryParams] = None,
              front: Optional[MotorSpec] = None, rear: Optional[MotorSpec] = None) -> "VehicleSystem":
        """Generate and fit both motor maps and bundle them with the vehicle."""
        powertrain = build_powertrain(front or default_front_motor(), rear or default_rear_motor())
        return cls(vehicle or VehicleParams(), battery or BatteryParams(), powertrain)


@dataclass
class RunLog:
    """Per-plant-step record of one run.

    Row k holds the state at ``t`` and the control applied over [t, t + dt];
    the state after the last step is ``final_state``.
    """
    frame: pd.DataFrame
    final_state: VehicleState
    scenario: str
    mode: RunMode
    dt: float
    initial_soc: float
    config: Dict = field(default_factory=dict)
    clamped_steps: int = 0

    @property
    def final_soc(self) -> float:
        return self.final_state.soc

    @property
    def duration(self) -> float:
        return len(self.frame) * self.dt

    def energy(self) -> float:
        """Battery-side traction energy in J."""
        return float(np.sum(self.frame["P_bat"].to_numpy()) * self.dt)

    def positions(self) -> np.ndarray:
        """Ego positions at every step boundary, final state included."""
        return np.append(self.frame["d"].to_numpy(), self.final_state.d)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.frame.to_csv(path, index=False)


# --- plant -----------------------------------------------------------------------------

def _advance(state: VehicleState, control: Control, phi: float, vehicle: VehicleParams,
             battery: BatteryParams, powertrain: Powertrain, dt: float) -> Tuple[VehicleState, float, float]:
    omega = min(motor_speed(state.v, vehicle), powertrain.omega_max)
    P_bat = float(powertrain.power(control.T_f, control.T_r, omega))
    current = battery_current(P_bat, battery)
    a = acceleration_from_torque(control.T_f + control.T_r, control.F_b, state.v, phi, vehicle)
    new = VehicleState(
        d=state.d + dt * state.v,
        v=max(0.0, state.v + dt * a),
        soc=soc_step(state.soc, current, dt, battery),
    )
    return new, P_bat, a


def plant_step(state: VehicleState, control: Control, phi: float, system: VehicleSystem,
               dt: float) -> VehicleState:
    """Forward-Euler truth plant; battery power is recomputed from the motor polynomials."""
    return _advance(state, control, phi, system.vehicle, system.battery, system.powertrain, dt)[0]


# --- closed loop -----------------------------------------------------------------------

def _planned_positions(prev: Optional[DecisionVector], shift: int, state: VehicleState,
                       N: int, dt: float) -> np.ndarray:
    """Positions for grade sampling: the shifted previous plan, then constant speed."""
    positions = state.d + state.v * dt * np.arange(N)
    if prev is not None and shift < N:
        keep = N - shift
        planned = prev.d[shift: shift + keep]
        positions[:keep] = planned - planned[0] + state.d
        positions[keep:] = positions[keep - 1] + state.v * dt * np.arange(1, N - keep + 1)
    return positions


def _emergency_torque(u_prev: Tuple[float, float], steps: int, dT: float) -> List[Tuple[float, float]]:
    """Torques ramping to zero at the rate limit."""
    out = []
    T_f, T_r = u_prev
    for _ in range(steps):
        T_f = math.copysign(max(abs(T_f) - dT, 0.0), T_f)
        T_r = math.copysign(max(abs(T_r) - dT, 0.0), T_r)
        out.append((T_f, T_r))
    return out


def _leading_signal(signals: List[SignalConstraint]) -> Tuple[str, str]:
    if not signals:
        return "", SignalMode.FREE.value
    first = min(signals, key=lambda s: s.d_sig)
    return first.intersection_id, first.mode.value


def run_closed_loop(scenario: Scenario, cfg: Optional[MpcConfig] = None,
                    system: Optional[VehicleSystem] = None,
                    ocp: Optional[OcpConfig] = None) -> RunLog:
    """Run the MPC over ``scenario`` and return the plant log.

    Raises CollisionError when the true gap closes, PowerExceedsBatteryLimit
    when an applied control asks more than the battery can deliver.
    """
    cfg = cfg or MpcConfig()
    system = system or VehicleSystem.build()
    N, M, dt = cfg.N, cfg.steps_per_update, cfg.dt
    if abs(scenario.dt - dt) > 1e-9:
        raise ValueError(f"scenario step {scenario.dt} differs from controller step {dt}")
    if scenario.duration < cfg.update - 1e-9:
        raise ValueError("scenario is shorter than one update interval")
    ocp_cfg = (ocp or OcpConfig()).model_copy(update={"N": N, "dt": dt})
    vehicle = system.vehicle
    if scenario.v_max != vehicle.v_max:
        vehicle = vehicle.model_copy(update={"v_max": scenario.v_max})
    pt = system.powertrain
    opts = cfg.solver

    t0 = float(scenario.t[0])
    d_p0, v_p0 = scenario.preceding_at(t0)
    state = VehicleState(d_p0 - cfg.initial_gap, min(v_p0, vehicle.v_max), cfg.initial_soc)
    rng = np.random.default_rng([cfg.seed, cfg.noise.seed])
    n_cycles = int(math.floor(scenario.duration / cfg.update + 1e-9))
    dT = vehicle.dT_max * dt

    battery = system.battery
    u_prev = (0.0, 0.0)
    backup: Optional[DecisionVector] = None
    backup_age = 0
    commitments: Dict = {}
    rows = []
    logger.info("closed loop on %s: %d cycles, horizon %d steps", scenario.name, n_cycles, N)

    for cycle in range(n_cycles):
        t = t0 + cycle * M * dt
        battery = system.bms(t, battery)
        pred = predict_preceding(scenario, t, N, dt)
        if not cfg.noise.is_ideal:
            pred, _ = perturb_prediction(pred, cfg.noise, rng)
        signals = plan_signal_constraints(state, t, pred, scenario.intersections, ocp_cfg, vehicle, commitments)
        shift = backup_age + M if backup is not None else N
        positions = _planned_positions(backup, shift, state, N, dt)
        problem = build_ocp(state, pred, signals, scenario.grade, vehicle, battery, pt, ocp_cfg,
                            u_prev, positions)
        z0 = warm_start(problem, backup, shift=shift if backup is not None else 0)
        sol = solve(problem, z0, opts)
        logger.debug("t=%.1f status=%s iterations=%d time=%.3f s kkt=%.1e", t, sol.status.value,
                     sol.iterations, sol.wall_time, sol.kkt)

        fallback = ""
        if sol.is_acceptable(opts.constraint_tol):
            plan, offset = DecisionVector(problem.layout, sol.z), 0
            backup, backup_age = plan, 0
        elif backup is not None and backup_age + M + M <= N:
            plan, offset = backup, backup_age + M
            backup_age += M
            fallback = "previous_plan"
            logger.warning("t=%.1f: solver returned %s, applying the previous plan", t, sol.status.value)
        else:
            plan, offset = None, 0
            backup = None
            fallback = "emergency"
            logger.warning("t=%.1f: solver returned %s and no plan is left, braking", t, sol.status.value)

        if plan is not None:
            controls = [(plan.T_f[offset + j], plan.T_r[offset + j], plan.F_b[offset + j],
                         plan.s1[offset + j], plan.s2[offset + j]) for j in range(M)]
        else:
            controls = [(T_f, T_r, None, 0.0, 0.0) for T_f, T_r in _emergency_torque(u_prev, M, dT)]

        intersection, mode = _leading_signal(signals)
        for j, (T_f, T_r, F_b, s1, s2) in enumerate(controls):
            tk = t + j * dt
            phi = float(scenario.grade(state.d))
            if F_b is None:
                load = vehicle.m * vehicle.g * math.sin(phi) + vehicle.mu_r * vehicle.m * vehicle.g * math.cos(phi) \
                    + 0.5 * vehicle.k_w * state.v ** 2
                cap = max(0.0, vehicle.n * (T_f + T_r) - load - vehicle.m * vehicle.a_min)
                F_b = min(vehicle.F_b_max, cfg.emergency_brake_gain * vehicle.m * state.v, cap)
            control = Control(float(T_f), float(T_r), 0.0, float(F_b))
            d_p, v_p = scenario.preceding_at(tk)
            new_state, P_bat, a = _advance(state, control, phi, vehicle, battery, pt, dt)
            rows.append({
                "t": tk, "d": state.d, "v": state.v, "soc": state.soc, "a": a,
                "T_f": control.T_f, "T_r": control.T_r, "P_bat": P_bat, "F_b": control.F_b,
                "s1": float(s1), "s2": float(s2), "d_p": d_p, "v_p": v_p, "gap": d_p - state.d,
                "intersection": intersection, "signal_mode": mode,
                "solver_status": sol.status.value, "solve_time": sol.wall_time if j == 0 else np.nan,
                "iterations": sol.iterations if j == 0 else np.nan, "fallback": fallback,
            })
            state = new_state
            u_prev = (control.T_f, control.T_r)
            d_p_next, _ = scenario.preceding_at(tk + dt)
            if d_p_next - state.d <= 0.0:
                raise CollisionError(tk + dt, d_p_next - state.d)

    frame = pd.DataFrame(rows, columns=RUNLOG_COLUMNS)
    log = RunLog(frame, state, scenario.name, RunMode.OPTIMAL, dt, cfg.initial_soc,
                 {"mpc": cfg.model_dump(mode="json"), "ocp": ocp_cfg.model_dump(mode="json")})
    logger.info("closed loop on %s done: final SOC %.6f", scenario.name, state.soc)
    return log


# --- audits and summary ----------------------------------------------------------------

def red_crossings(log: RunLog, scenario: Scenario) -> List[Dict]:
    """Stop-line crossings whose plant step starts during red."""
    d = log.positions()
    t = log.frame["t"].to_numpy()
    out = []
    for inter in scenario.intersections:
        crossed = np.nonzero((d[:-1] < inter.d_sig) & (d[1:] >= inter.d_sig))[0]
        for k in crossed:
            if inter.is_red(float(t[k])):
                out.append({"intersection": inter.id, "t": float(t[k]), "d": float(d[k])})
    return out


def _worst(*excess) -> float:
    return max([float(np.max(x, initial=0.0)) for x in excess] + [0.0])


def audit_run(log: RunLog, scenario: Scenario, vehicle: VehicleParams, battery: BatteryParams,
              powertrain: Powertrain, ocp: Optional[OcpConfig] = None) -> Dict[str, float]:
    """Safety, signal and hard-constraint audit of an optimal-mode log.

    Inequality residuals are in the units the OCP enforces them: variable
    bounds divided by the variable scale, rows times their row scale.
    ``dynamics_residual_max`` checks that consecutive logged states follow
    the plant model from the logged controls.
    """
    c = ocp or OcpConfig()
    f = log.frame
    v_max = scenario.v_max
    d_next = log.positions()[1:]
    t_next = f["t"].to_numpy() + log.dt
    d_p_next = np.array([scenario.preceding_at(tk)[0] for tk in t_next])
    gaps = np.append(f["gap"].to_numpy(), d_p_next[-1] - d_next[-1]) if len(f) else np.zeros(0)
    speeds = np.append(f["v"].to_numpy(), log.final_state.v)
    s2_max = float(f["s2"].max()) if len(f) else 0.0
    safety = gaps - (c.d_min + c.h_min * speeds - s2_max)

    v = f["v"].to_numpy()
    a = f["a"].to_numpy()
    T_f, T_r = f["T_f"].to_numpy(), f["T_r"].to_numpy()
    F_b, P_bat = f["F_b"].to_numpy(), f["P_bat"].to_numpy()
    dTf = np.abs(np.diff(np.concatenate([[0.0], T_f])))
    dTr = np.abs(np.diff(np.concatenate([[0.0], T_r])))
    soc = np.append(f["soc"].to_numpy(), log.final_soc)
    p_limit = c.battery_power_fraction * battery.max_discharge_power
    dT = vehicle.dT_max * log.dt
    residuals = {
        "speed": _worst(speeds - v_max, -speeds),
        "motor_speed": _worst(speeds - powertrain.omega_max / vehicle.n),
        "accel": _worst(a - vehicle.a_max, vehicle.a_min - a),
        "torque_envelope": _worst(
            (np.abs(T_f) - powertrain.front.T_stall) / TORQUE_SCALE,
            (np.abs(T_r) - powertrain.rear.T_stall) / TORQUE_SCALE,
            ENVELOPE_ROW_SCALE * (vehicle.n * np.abs(v * T_f) - powertrain.front.P_rated),
            ENVELOPE_ROW_SCALE * (vehicle.n * np.abs(v * T_r) - powertrain.rear.P_rated),
        ),
        "side_slip": _worst(-SLIP_ROW_SCALE * T_f * T_r),
        "torque_rate": _worst(dTf - dT, dTr - dT),
        "brake": _worst(-F_b / BRAKE_SCALE, (F_b - vehicle.F_b_max) / BRAKE_SCALE),
        "battery_power": _worst((np.abs(P_bat) - p_limit) / POWER_SCALE),
        "soc_window": _worst(battery.soc_min - soc, soc - battery.soc_max),
    }

    positions = log.positions()
    soc_next = soc_step(soc[:-1], battery_current(P_bat, battery), log.dt, battery) if len(f) else np.zeros(0)
    dynamics = {
        "position": _worst(np.abs(positions[1:] - positions[:-1] - log.dt * speeds[:-1]) / DISTANCE_SCALE),
        "velocity": _worst(np.abs(speeds[1:] - np.maximum(0.0, speeds[:-1] + log.dt * a))),
        "soc": _worst(np.abs(soc[1:] - soc_next)),
    }
    return {
        "collisions": int(np.sum(gaps <= 0.0)),
        "red_crossings": len(red_crossings(log, scenario)),
        "safety_violations": int(np.sum(safety < -AUDIT_TOL)),
        "min_gap": float(np.min(gaps)) if len(gaps) else math.nan,
        "hard_constraint_max": max(residuals.values()),
        "dynamics_residual_max": max(dynamics.values()),
        **{f"residual_{k}": v for k, v in residuals.items()},
        **{f"dynamics_{k}": v for k, v in dynamics.items()},
    }


def summarize_run(log: RunLog, audit: Optional[Dict[str, float]] = None) -> Dict:
    f = log.frame
    times = f["solve_time"].dropna().to_numpy()
    summary = {
        "scenario": log.scenario,
        "mode": log.mode.value,
        "duration": log.duration,
        "initial_soc": log.initial_soc,
        "final_soc": log.final_soc,
        "final_d": log.final_state.d,
        "final_v": log.final_state.v,
        "soc_used": log.initial_soc - log.final_soc,
        "energy_J": log.energy(),
        "distance": log.final_state.d - float(f["d"].iloc[0]) if len(f) else 0.0,
        "cycles": int(len(times)),
        "fallbacks": int((f["fallback"] != "").sum()),
        "s1_max": float(f["s1"].max()) if len(f) else 0.0,
        "s2_max": float(f["s2"].max()) if len(f) else 0.0,
        "clamped_steps": int(log.clamped_steps),
    }
    if len(times):
        summary.update({
            "solve_time_mean": float(np.mean(times)),
            "solve_time_median": float(np.median(times)),
            "solve_time_p90": float(np.percentile(times, 90)),
            "solve_time_max": float(np.max(times)),
            "iterations_mean": float(f["iterations"].dropna().mean()),
            "optimal_fraction": float(np.mean(f.loc[f["solve_time"].notna(), "solver_status"]
                                              == SolverStatus.OPTIMAL.value)),
        })
    if audit:
        summary.update(audit)
    return summary
