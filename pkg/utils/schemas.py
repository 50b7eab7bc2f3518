"""Parameter and configuration schemas.

Every record is a frozen pydantic model so a configuration, once loaded, can be
shared between runs and worker processes without copying. Defaults carry the
reference vehicle (mid-size dual-motor EV) and the controller tuning used by
the closed-loop experiments.
"""
import configparser
import io
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from utils.models import MotorKind, RunMode


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class VehicleParams(_Frozen):
    """Longitudinal vehicle constants."""
    m: float = Field(1780.0, gt=0, description="total mass kg")
    g: float = Field(9.81, gt=0)
    C_D: float = Field(0.306, gt=0)
    rho_a: float = Field(1.205, gt=0)
    A: float = Field(2.2, gt=0, description="frontal area m^2")
    mu_r: float = Field(0.009, ge=0)
    n: float = Field(22.910, gt=0, description="final drive ratio over tire radius, rad/m")
    F_b_max: float = Field(15000.0, gt=0)
    a_min: float = Field(-3.0, lt=0)
    a_max: float = Field(3.0, gt=0)
    v_max: float = Field(20.0, gt=0)
    j_max: float = Field(3.0, gt=0)
    dT_max: float = Field(150.0, gt=0, description="torque rate limit N*m/s")

    @property
    def k_w(self) -> float:
        """Wind-resistance coefficient, always derived from its components."""
        return self.C_D * self.rho_a * self.A


class BatteryParams(_Frozen):
    """Equivalent-resistance pack.

    ``C_bat`` is stored in A*s. Config files may give ``capacity_ah`` instead;
    it is converted here, once.
    """
    U_oc: float = Field(360.0, gt=0)
    R_b: float = Field(0.228, gt=0)
    C_bat: float = Field(150.0 * 3600.0, gt=0)
    soc_min: float = Field(0.0, ge=0, le=1)
    soc_max: float = Field(1.0, ge=0, le=1)

    @model_validator(mode="before")
    @classmethod
    def _convert_capacity(cls, data):
        if isinstance(data, dict) and "capacity_ah" in data:
            data = dict(data)
            if "C_bat" in data:
                raise ValueError("give either capacity_ah or C_bat, not both")
            data["C_bat"] = float(data.pop("capacity_ah")) * 3600.0
        return data

    @model_validator(mode="after")
    def _check_soc_window(self):
        if not self.soc_min < self.soc_max:
            raise ValueError("soc_min must be below soc_max")
        return self

    @property
    def max_discharge_power(self) -> float:
        return self.U_oc ** 2 / (4.0 * self.R_b)


class MotorSpec(_Frozen):
    """Motor envelope and synthetic loss model.

    P_loss = c0 + c1*|w| + c2*w^2 + c3*T^2 + c4*|w*T|
    """
    kind: MotorKind
    T_stall: float = Field(gt=0)
    P_rated: float = Field(gt=0)
    omega_max: float = Field(1400.0, gt=0)
    c0: float = Field(gt=0, description="constant (controller/idle) loss W")
    c1: float = Field(ge=0, description="iron loss W per rad/s")
    c2: float = Field(ge=0, description="windage loss W per (rad/s)^2")
    c3: float = Field(ge=0, description="copper loss W per (N*m)^2")
    c4: float = Field(ge=0, description="inverter loss per W of shaft power")
    omega_step: float = Field(10.0, gt=0)
    torque_step: float = Field(5.0, gt=0)

    @property
    def loss_coeffs(self) -> List[float]:
        return [self.c0, self.c1, self.c2, self.c3, self.c4]


def default_front_motor() -> MotorSpec:
    """Induction motor: more stall torque, higher losses."""
    return MotorSpec(
        kind=MotorKind.IM, T_stall=280.0, P_rated=150_000.0,
        c0=150.0, c1=1.5, c2=0.0015, c3=0.12, c4=0.03,
    )


def default_rear_motor() -> MotorSpec:
    """Permanent-magnet synchronous motor."""
    return MotorSpec(
        kind=MotorKind.PMSM, T_stall=240.0, P_rated=120_000.0,
        c0=100.0, c1=0.6, c2=0.0008, c3=0.08, c4=0.02,
    )


class OcpConfig(_Frozen):
    """Horizon, cost weights and car-following/signal geometry."""
    N: int = Field(150, ge=1)
    dt: float = Field(0.1, gt=0)
    w1: float = Field(10 ** 1.5, ge=0)
    w2: float = Field(1e-3, ge=0)
    w3: float = Field(10.0, ge=0)
    w4: float = Field(100.0, ge=0)
    w5: float = Field(1.0, ge=0)
    w6: float = Field(1.0, ge=0)
    h_head: float = Field(2.5, ge=0)
    h_min: float = Field(0.5, ge=0)
    d_max: float = Field(80.0, gt=0)
    d_min: float = Field(1.0, ge=0)
    d_stop_margin: float = Field(1.0, ge=0)
    pass_margin: float = Field(1.0, ge=0)
    use_terminal_gap: bool = True
    use_terminal_speed: bool = True
    battery_power_fraction: float = Field(0.95, gt=0, le=1)

    @model_validator(mode="after")
    def _check_gaps(self):
        if self.d_min >= self.d_max:
            raise ValueError("d_min must be below d_max")
        return self


class SolverOptions(_Frozen):
    max_iter: int = Field(150, ge=1)
    kkt_tol: float = Field(1e-6, gt=0)
    constraint_tol: float = Field(1e-6, gt=0)
    mu_init: float = Field(0.1, gt=0)
    kappa_mu: float = Field(0.2, gt=0, lt=1)
    theta_mu: float = Field(1.5, gt=1, lt=2)
    kappa_eps: float = Field(10.0, gt=0)
    tau_min: float = Field(0.99, gt=0, lt=1)
    armijo_eta: float = Field(1e-4, gt=0, lt=0.5)
    backtrack_factor: float = Field(0.5, gt=0, lt=1)
    min_step: float = Field(1e-12, gt=0)
    reg_floor: float = Field(1e-8, gt=0, description="primal regularization delta_w")
    reg_max: float = Field(1e6, gt=0)
    constraint_reg: float = Field(1e-10, ge=0, description="dual regularization delta_c")
    bound_push: float = Field(1e-2, gt=0)
    bound_relax: float = Field(1e-8, ge=0)
    hessian: str = Field("auto", pattern="^(auto|exact|bfgs)$")
    time_budget: Optional[float] = Field(None, gt=0, description="seconds; None disables")
    record_trace: bool = False


class NoiseConfig(_Frozen):
    sigma: float = Field(0.0, ge=0)
    mu: float = 0.0
    P_s: float = Field(0.0, ge=0)
    seed: int = 0
    shift_first: bool = True

    @property
    def is_ideal(self) -> bool:
        return self.sigma == 0.0 and self.mu == 0.0 and self.P_s == 0.0


class MpcConfig(_Frozen):
    horizon: float = Field(15.0, gt=0)
    update: float = Field(1.0, gt=0)
    dt: float = Field(0.1, gt=0)
    initial_gap: float = Field(40.0, gt=0)
    initial_soc: float = Field(0.8, gt=0, le=1)
    seed: int = 0
    emergency_brake_gain: float = Field(0.5, gt=0, description="F_b = gain*m*v")
    noise: NoiseConfig = NoiseConfig()
    solver: SolverOptions = SolverOptions()

    @model_validator(mode="after")
    def _check_grid(self):
        for name in ("horizon", "update"):
            ratio = getattr(self, name) / self.dt
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"{name}/dt must be integral, got {ratio}")
        if self.update > self.horizon:
            raise ValueError("update interval exceeds horizon")
        return self

    @property
    def N(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def steps_per_update(self) -> int:
        return int(round(self.update / self.dt))


class DriverParams(_Frozen):
    """Intelligent-driver parameters of the generated leader."""
    v_desired_min: float = Field(12.0, gt=0)
    v_desired_max: float = Field(18.0, gt=0)
    time_headway: float = Field(1.5, gt=0)
    a_max: float = Field(1.5, gt=0)
    b_comf: float = Field(2.0, gt=0)
    b_max: float = Field(6.0, gt=0)
    jam_distance: float = Field(2.0, ge=0)
    delta: float = Field(4.0, gt=0)
    commit_time: float = Field(4.0, gt=0, description="look-ahead before red at which go/stop is fixed")
    redraw_interval: float = Field(20.0, gt=0)

    @model_validator(mode="after")
    def _check_speeds(self):
        if self.v_desired_min > self.v_desired_max:
            raise ValueError("v_desired_min exceeds v_desired_max")
        return self


class CorridorConfig(_Frozen):
    n_intersections: int = Field(2, ge=0)
    first_signal: float = Field(300.0, gt=0, description="position of the first stop line m")
    spacing: float = Field(400.0, gt=0)
    cycle: float = Field(60.0, gt=0)
    green_fraction: float = Field(0.5, gt=0, lt=1)
    duration: float = Field(180.0, gt=0)
    dt: float = Field(0.1, gt=0)
    v_max: float = Field(20.0, gt=0)
    initial_position: float = Field(40.0, ge=0)
    initial_speed_min: float = Field(8.0, ge=0)
    initial_speed_max: float = Field(14.0, ge=0)
    stop_margin: float = Field(1.0, ge=0)
    driver: DriverParams = DriverParams()


class RunConfig(_Frozen):
    """Everything one CLI invocation needs."""
    mode: RunMode = RunMode.OPTIMAL
    scenario: Optional[str] = None
    signals: Optional[str] = None
    grade: Optional[str] = None
    out: str = "out"
    vehicle: VehicleParams = VehicleParams()
    battery: BatteryParams = BatteryParams()
    front: MotorSpec = Field(default_factory=default_front_motor)
    rear: MotorSpec = Field(default_factory=default_rear_motor)
    ocp: OcpConfig = OcpConfig()
    mpc: MpcConfig = MpcConfig()
    corridor: CorridorConfig = CorridorConfig()
    split_front: float = Field(1.0, ge=0)
    split_rear: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.split_front + self.split_rear <= 0:
            raise ValueError("split ratio must have a positive sum")
        return self

    def horizon_ocp(self) -> OcpConfig:
        """OCP settings with N and dt taken from the MPC timing."""
        return self.ocp.model_copy(update={"N": self.mpc.N, "dt": self.mpc.dt})


# --- INI files ---------------------------------------------------------------------------

class ConfigError(ValueError):
    pass


# section -> path of the nested model inside RunConfig
INI_SECTIONS = {
    "vehicle": ("vehicle",),
    "battery": ("battery",),
    "motor.front": ("front",),
    "motor.rear": ("rear",),
    "ocp": ("ocp",),
    "mpc": ("mpc",),
    "solver": ("mpc", "solver"),
    "noise": ("mpc", "noise"),
    "corridor": ("corridor",),
    "driver": ("corridor", "driver"),
    "run": (),
}


def _parse_value(raw: str):
    text = raw.strip()
    return None if text.lower() in ("", "none") else text


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Build a RunConfig from INI text; missing keys keep their defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    # motor sections override the default motors key by key
    data: Dict[str, Any] = {
        "front": default_front_motor().model_dump(mode="json"),
        "rear": default_rear_motor().model_dump(mode="json"),
    }
    for section in parser.sections():
        if section not in INI_SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        target = data
        for key in INI_SECTIONS[section]:
            target = target.setdefault(key, {})
        for key, raw in parser.items(section):
            target[key] = _parse_value(raw)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc.errors()[0]['loc']}: {exc.errors()[0]['msg']}") from exc


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), source=str(path))


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved INI text; parse_config(dump_config(cfg)) == cfg."""
    data = cfg.model_dump(mode="json")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, path in INI_SECTIONS.items():
        values = data
        for key in path:
            values = values[key]
        flat = {k: ("none" if v is None else str(v)) for k, v in values.items() if not isinstance(v, dict)}
        parser[section] = flat
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()
