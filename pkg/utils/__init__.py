"""Initialize the utils package with proper import ordering."""
# First import value types and parameter models
from .models import Control, MotorKind, RunMode, SignalMode, SignalPhase, SolverStatus, VehicleState
from .schemas import (
    BatteryParams,
    ConfigError,
    CorridorConfig,
    MotorSpec,
    MpcConfig,
    NoiseConfig,
    OcpConfig,
    RunConfig,
    SolverOptions,
    VehicleParams,
    load_config,
    parse_config,
)

# Then the physical models
from .vehicle_model import acceleration_from_torque, motor_speed, resistive_forces, torque_from_acceleration
from .battery import PowerExceedsBatteryLimit, battery_current, soc_step
from .powertrain import (
    DomainError,
    EfficiencyMap,
    MotorSpecError,
    PolynomialFitError,
    PowerPolynomial,
    Powertrain,
    build_powertrain,
    fit_power_polynomial,
    generate_motor_map,
)
from .traffic import (
    PredictionRangeError,
    Scenario,
    ScenarioValidationError,
    generate_corridor_scenario,
    load_scenario,
    predict_preceding,
)

# Then the optimizer and the closed loop
from .ocp import OcpBuildError, OcpProblem, build_ocp
from .nlp_solver import Solution, kkt_residual, solve
from .mpc import CollisionError, RunLog, VehicleSystem, plant_step, run_closed_loop
from .baseline_metrics import (
    MetricError,
    SplitRatio,
    TorqueDemandError,
    baseline_run,
    compute_r_m,
    compute_r_soc,
    rule_based_split,
)

__all__ = [
    'Control',
    'MotorKind',
    'RunMode',
    'SignalMode',
    'SignalPhase',
    'SolverStatus',
    'VehicleState',
    'BatteryParams',
    'CorridorConfig',
    'MotorSpec',
    'MpcConfig',
    'NoiseConfig',
    'OcpConfig',
    'RunConfig',
    'SolverOptions',
    'VehicleParams',
    'load_config',
    'parse_config',
    'acceleration_from_torque',
    'motor_speed',
    'resistive_forces',
    'torque_from_acceleration',
    'battery_current',
    'soc_step',
    'EfficiencyMap',
    'PowerPolynomial',
    'Powertrain',
    'build_powertrain',
    'fit_power_polynomial',
    'generate_motor_map',
    'Scenario',
    'generate_corridor_scenario',
    'load_scenario',
    'predict_preceding',
    'OcpProblem',
    'build_ocp',
    'Solution',
    'kkt_residual',
    'solve',
    'RunLog',
    'VehicleSystem',
    'plant_step',
    'run_closed_loop',
    'SplitRatio',
    'baseline_run',
    'compute_r_m',
    'compute_r_soc',
    'rule_based_split',
    # errors
    'ConfigError',
    'PowerExceedsBatteryLimit',
    'DomainError',
    'MotorSpecError',
    'PolynomialFitError',
    'PredictionRangeError',
    'ScenarioValidationError',
    'OcpBuildError',
    'CollisionError',
    'MetricError',
    'TorqueDemandError',
]
