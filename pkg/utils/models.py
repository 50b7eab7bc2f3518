"""Plain value types shared across the simulator."""
import enum
from dataclasses import dataclass


class MotorKind(str, enum.Enum):
    IM = "IM"
    PMSM = "PMSM"


class RunMode(str, enum.Enum):
    OPTIMAL = "optimal"
    BASELINE = "baseline"
    ABLATION = "ablation"


class SignalPhase(str, enum.Enum):
    GREEN = "green"
    RED = "red"


class SignalMode(str, enum.Enum):
    """How the controller treats one intersection during a cycle."""
    FREE = "free"
    PASS = "pass"
    WAIT = "wait"


class SolverStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    TIME_BUDGET = "TimeBudget"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class VehicleState:
    """Ego state: position m, speed m/s, state of charge."""
    d: float
    v: float
    soc: float


@dataclass(frozen=True)
class Control:
    """Actuator command held over one plant step."""
    T_f: float
    T_r: float
    P_bat: float = 0.0
    F_b: float = 0.0

    @property
    def total_torque(self) -> float:
        return self.T_f + self.T_r
