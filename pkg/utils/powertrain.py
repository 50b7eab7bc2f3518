"""Motor maps, their polynomial surrogates and the dual-motor powertrain.

Each motor is described by a parametric loss model. A map is sampled on a
regular (speed, torque) grid and a single total-degree-5 polynomial in
(omega, T) is fitted to the battery-side power over both the propelling and
the regenerating quadrant, so the optimizer sees one smooth function per
motor.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator
from sklearn.linear_model import LinearRegression
from sklearn.metrics import mean_squared_error, r2_score
from sklearn.preprocessing import PolynomialFeatures

from utils.schemas import MotorSpec, VehicleParams

logger = logging.getLogger(__name__)

OMEGA_EPS = 1.0  # rad/s floor of the constant-power branch
POLY_DEGREE = 5


class DomainError(ValueError):
    """Query outside the (omega, T) region a map or polynomial covers."""


class MotorSpecError(ValueError):
    pass


class PolynomialFitError(ValueError):
    pass


def loss_power(spec: MotorSpec, omega, torque):
    omega = np.asarray(omega, dtype=float)
    torque = np.asarray(torque, dtype=float)
    return (
        spec.c0
        + spec.c1 * np.abs(omega)
        + spec.c2 * omega ** 2
        + spec.c3 * torque ** 2
        + spec.c4 * np.abs(omega * torque)
    )


def max_torque_envelope(spec: MotorSpec, omega):
    """min(T_stall, P_rated / max(omega, eps)); the same bound holds in regen."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0) or np.any(omega > spec.omega_max):
        raise DomainError(f"motor speed outside [0, {spec.omega_max}] rad/s")
    envelope = np.minimum(spec.T_stall, spec.P_rated / np.maximum(omega, OMEGA_EPS))
    return float(envelope) if envelope.ndim == 0 else envelope


def efficiency_from_power(omega, torque, p_elec):
    """Piecewise efficiency; NaN where it is undefined.

    Undefined means zero shaft power, or a regenerating point whose losses
    eat the whole recovered power.
    """
    mech = np.asarray(omega, dtype=float) * np.asarray(torque, dtype=float)
    p_elec = np.asarray(p_elec, dtype=float)
    mech, p_elec = np.broadcast_arrays(mech, p_elec)
    eta = np.full(mech.shape, np.nan)
    propel = (mech > 0) & (p_elec > 0)
    regen = (mech < 0) & (p_elec < 0)
    eta[propel] = mech[propel] / p_elec[propel]
    eta[regen] = p_elec[regen] / mech[regen]
    return float(eta) if eta.ndim == 0 else eta


def energy_consistent(mech, p_elec) -> np.ndarray:
    """Battery power bounds shaft power: p_elec >= mech, and in regen also p_elec <= 0.

    A regenerating point that still draws from the battery recovers nothing,
    so |p_elec| <= |mech| holds wherever the mask is true and mech < 0.
    """
    mech, p_elec = np.broadcast_arrays(np.asarray(mech, dtype=float), np.asarray(p_elec, dtype=float))
    return (p_elec >= mech) & ((mech >= 0) | (p_elec <= 0))


def _symmetric_grid(limit: float, step: float) -> np.ndarray:
    k = int(np.floor(limit / step + 1e-9))
    grid = step * np.arange(-k, k + 1, dtype=float)
    if k * step < limit - 1e-9:
        grid = np.concatenate(([-limit], grid, [limit]))
    return grid


@dataclass(frozen=True)
class EfficiencyMap:
    """Battery-side power and efficiency on a regular (omega, T) grid.

    Arrays are indexed [omega, torque]. ``eta`` is NaN outside the torque
    envelope and wherever efficiency is undefined.
    """
    omega_grid: np.ndarray
    torque_grid: np.ndarray
    p_elec: np.ndarray
    eta: np.ndarray
    kind: Optional[str] = None

    def __post_init__(self):
        for name in ("omega_grid", "torque_grid"):
            grid = getattr(self, name)
            if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
        shape = (self.omega_grid.size, self.torque_grid.size)
        if self.p_elec.shape != shape or self.eta.shape != shape:
            raise ValueError(f"map arrays must have shape {shape}")

    @classmethod
    def from_power(cls, omega_grid, torque_grid, p_elec, envelope=None, kind=None) -> "EfficiencyMap":
        omega_grid = np.asarray(omega_grid, dtype=float)
        torque_grid = np.asarray(torque_grid, dtype=float)
        p_elec = np.asarray(p_elec, dtype=float)
        W, T = np.meshgrid(omega_grid, torque_grid, indexing="ij")
        eta = np.asarray(efficiency_from_power(W, T, p_elec), dtype=float)
        if envelope is not None:
            eta = np.where(np.abs(T) <= envelope[:, None] + 1e-9, eta, np.nan)
        consistent = energy_consistent(W * T, p_elec)
        if not consistent.all():
            logger.debug("%s map: eta masked at %d points where losses exceed recovered power",
                         kind, int((~consistent).sum()))
        eta = np.where(consistent, eta, np.nan)
        return cls(omega_grid, torque_grid, p_elec, eta, kind)

    def energy_consistent(self) -> np.ndarray:
        W, T = np.meshgrid(self.omega_grid, self.torque_grid, indexing="ij")
        return energy_consistent(W * T, self.p_elec)

    @property
    def domain(self) -> Tuple[float, float, float, float]:
        return (self.omega_grid[0], self.omega_grid[-1], self.torque_grid[0], self.torque_grid[-1])

    def power_at(self, omega, torque):
        """Bilinear lookup of battery-side power."""
        interp = RegularGridInterpolator((self.omega_grid, self.torque_grid), self.p_elec)
        omega, torque = np.broadcast_arrays(np.asarray(omega, dtype=float), np.asarray(torque, dtype=float))
        try:
            values = interp(np.stack([omega.ravel(), torque.ravel()], axis=-1))
        except ValueError as e:
            raise DomainError(str(e)) from e
        values = values.reshape(omega.shape)
        return float(values) if values.ndim == 0 else values

    def to_frame(self) -> pd.DataFrame:
        W, T = np.meshgrid(self.omega_grid, self.torque_grid, indexing="ij")
        return pd.DataFrame({
            "omega": W.ravel(),
            "torque": T.ravel(),
            "p_elec": self.p_elec.ravel(),
            "eta": self.eta.ravel(),
        })

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, kind=None) -> "EfficiencyMap":
        frame = frame.sort_values(["omega", "torque"])
        omega_grid = np.unique(frame["omega"].to_numpy())
        torque_grid = np.unique(frame["torque"].to_numpy())
        shape = (omega_grid.size, torque_grid.size)
        if len(frame) != shape[0] * shape[1]:
            raise ValueError("map CSV is not a full rectangular grid")
        return cls(
            omega_grid,
            torque_grid,
            frame["p_elec"].to_numpy().reshape(shape),
            frame["eta"].to_numpy().reshape(shape),
            kind,
        )

    def save_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def load_csv(cls, path: Union[str, Path], kind=None) -> "EfficiencyMap":
        return cls.from_frame(pd.read_csv(path, float_precision="round_trip"), kind)


def generate_motor_map(spec: MotorSpec) -> EfficiencyMap:
    """Sample the loss model of ``spec`` on its default grid."""
    omega_grid = np.arange(0.0, spec.omega_max + 0.5 * spec.omega_step, spec.omega_step)
    omega_grid = omega_grid[omega_grid <= spec.omega_max + 1e-9]
    torque_grid = _symmetric_grid(spec.T_stall, spec.torque_step)
    W, T = np.meshgrid(omega_grid, torque_grid, indexing="ij")
    mech = W * T
    p_elec = mech + loss_power(spec, W, T)

    envelope = max_torque_envelope(spec, omega_grid)
    feasible = np.abs(T) <= envelope[:, None] + 1e-9
    lossless = feasible & (mech != 0) & (p_elec <= mech)
    if np.any(lossless):
        i, j = np.argwhere(lossless)[0]
        raise MotorSpecError(
            f"{spec.kind.value} loss model gives efficiency >= 1 at "
            f"omega={omega_grid[i]:.1f}, T={torque_grid[j]:.1f}"
        )
    return EfficiencyMap.from_power(omega_grid, torque_grid, p_elec, envelope, spec.kind.value)


def _falling(p: np.ndarray, k: int) -> np.ndarray:
    out = np.ones_like(p, dtype=float)
    for i in range(k):
        out = out * (p - i)
    return out


@dataclass(frozen=True)
class PowerPolynomial:
    """Bivariate polynomial p(omega, T) on normalized inputs.

    p = sum_j coeffs[j] * (omega/omega_scale)**powers[j,0] * (T/torque_scale)**powers[j,1]
    """
    powers: np.ndarray
    coeffs: np.ndarray
    omega_scale: float
    torque_scale: float
    domain: Tuple[float, float, float, float]
    rmse: float = 0.0
    r2: float = 1.0
    kind: Optional[str] = None

    def _terms(self, omega, torque, d_omega=0, d_torque=0):
        x = np.asarray(omega, dtype=float)[..., None] / self.omega_scale
        y = np.asarray(torque, dtype=float)[..., None] / self.torque_scale
        px = self.powers[:, 0]
        py = self.powers[:, 1]
        factor = _falling(px, d_omega) * _falling(py, d_torque)
        factor = factor / (self.omega_scale ** d_omega * self.torque_scale ** d_torque)
        return factor * x ** np.maximum(px - d_omega, 0) * y ** np.maximum(py - d_torque, 0)

    def in_domain(self, omega, torque, tol: float = 1e-6) -> bool:
        w_lo, w_hi, t_lo, t_hi = self.domain
        omega = np.asarray(omega, dtype=float)
        torque = np.asarray(torque, dtype=float)
        w_tol = tol * max(1.0, w_hi)
        t_tol = tol * max(1.0, t_hi)
        return bool(
            np.all(omega >= w_lo - w_tol) and np.all(omega <= w_hi + w_tol)
            and np.all(torque >= t_lo - t_tol) and np.all(torque <= t_hi + t_tol)
        )

    def evaluate(self, omega, torque, check: bool = True):
        if check and not self.in_domain(omega, torque):
            raise DomainError(f"({self.kind}) polynomial queried outside its fitted domain {self.domain}")
        value = self._terms(omega, torque) @ self.coeffs
        return float(value) if np.ndim(value) == 0 else value

    __call__ = evaluate

    def gradient(self, omega, torque):
        """(dp/domega, dp/dT)."""
        return (
            self._terms(omega, torque, 1, 0) @ self.coeffs,
            self._terms(omega, torque, 0, 1) @ self.coeffs,
        )

    def hessian(self, omega, torque):
        """(d2p/domega2, d2p/domega dT, d2p/dT2)."""
        return (
            self._terms(omega, torque, 2, 0) @ self.coeffs,
            self._terms(omega, torque, 1, 1) @ self.coeffs,
            self._terms(omega, torque, 0, 2) @ self.coeffs,
        )


def fit_power_polynomial(power_map: EfficiencyMap, degree: int = POLY_DEGREE) -> PowerPolynomial:
    """Least-squares fit of battery-side power over the whole map grid."""
    if power_map.torque_grid[0] >= 0 or power_map.torque_grid[-1] <= 0:
        raise PolynomialFitError("map must span both regenerating and propelling torque")

    W, T = np.meshgrid(power_map.omega_grid, power_map.torque_grid, indexing="ij")
    omega_scale = float(np.max(np.abs(power_map.omega_grid)))
    torque_scale = float(np.max(np.abs(power_map.torque_grid)))
    X = np.column_stack([W.ravel() / omega_scale, T.ravel() / torque_scale])
    y = power_map.p_elec.ravel()

    features = PolynomialFeatures(degree=degree, include_bias=True)
    design = features.fit_transform(X)
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        raise PolynomialFitError(
            f"grid of {len(y)} points gives rank {rank} < {design.shape[1]} monomials"
        )

    model = LinearRegression(fit_intercept=False)
    model.fit(design, y)
    predicted = model.predict(design)
    rmse = float(np.sqrt(mean_squared_error(y, predicted)))
    r2 = float(r2_score(y, predicted))

    poly = PowerPolynomial(
        powers=features.powers_.astype(int),
        coeffs=np.asarray(model.coef_, dtype=float),
        omega_scale=omega_scale,
        torque_scale=torque_scale,
        domain=power_map.domain,
        rmse=rmse,
        r2=r2,
        kind=power_map.kind,
    )
    logger.debug("fitted %s power polynomial: rmse=%.2f W, r2=%.6f", power_map.kind, rmse, r2)
    return poly


def efficiency_at(source, omega, torque):
    """Efficiency at (omega, T) from a MotorSpec, an EfficiencyMap or a PowerPolynomial."""
    if isinstance(source, MotorSpec):
        omega_arr = np.asarray(omega, dtype=float)
        if (np.any(omega_arr < 0) or np.any(omega_arr > source.omega_max)
                or np.any(np.abs(np.asarray(torque, dtype=float)) > source.T_stall)):
            raise DomainError(f"({source.kind.value}) query outside motor domain")
        p_elec = np.asarray(omega, dtype=float) * np.asarray(torque, dtype=float) + loss_power(source, omega, torque)
    elif isinstance(source, EfficiencyMap):
        p_elec = source.power_at(omega, torque)
    elif isinstance(source, PowerPolynomial):
        p_elec = source.evaluate(omega, torque)
    else:
        raise TypeError(f"cannot take efficiency from {type(source).__name__}")
    return efficiency_from_power(omega, torque, p_elec)


def electrical_power(poly_f: PowerPolynomial, poly_r: PowerPolynomial, T_f, T_r, v, p: VehicleParams):
    """Traction power drawn from the battery by both motors at speed ``v``."""
    omega = p.n * np.asarray(v, dtype=float)
    total = poly_f.evaluate(omega, T_f) + poly_r.evaluate(omega, T_r)
    return float(total) if np.ndim(total) == 0 else total


@dataclass(frozen=True)
class Powertrain:
    """Front and rear motors with their fitted power polynomials."""
    front: MotorSpec
    rear: MotorSpec
    poly_f: PowerPolynomial
    poly_r: PowerPolynomial
    front_map: Optional[EfficiencyMap] = field(default=None, compare=False)
    rear_map: Optional[EfficiencyMap] = field(default=None, compare=False)

    @property
    def omega_max(self) -> float:
        return min(self.front.omega_max, self.rear.omega_max)

    def torque_limits(self, omega):
        """Per-motor torque envelopes at ``omega`` (clipped to the shared speed range)."""
        omega = np.clip(np.asarray(omega, dtype=float), 0.0, self.omega_max)
        return max_torque_envelope(self.front, omega), max_torque_envelope(self.rear, omega)

    def power(self, T_f, T_r, omega):
        """Unchecked polynomial power; used inside the optimizer."""
        return self.poly_f.evaluate(omega, T_f, check=False) + self.poly_r.evaluate(omega, T_r, check=False)


def build_powertrain(front: MotorSpec, rear: MotorSpec) -> Powertrain:
    front_map = generate_motor_map(front)
    rear_map = generate_motor_map(rear)
    poly_f = fit_power_polynomial(front_map)
    poly_r = fit_power_polynomial(rear_map)
    for poly, m in ((poly_f, front_map), (poly_r, rear_map)):
        logger.info(
            "%s map fitted: rmse %.1f W (%.3f%% of peak)",
            poly.kind, poly.rmse, 100.0 * poly.rmse / np.max(np.abs(m.p_elec)),
        )
    return Powertrain(front, rear, poly_f, poly_r, front_map, rear_map)
