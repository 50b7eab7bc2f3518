"""Longitudinal vehicle dynamics.

Sign convention: the friction brake force F_b is non-negative and always
decelerates the vehicle,

    m*a = n*T_m - F_g - F_r - F_a - F_b

All functions accept numpy arrays as well as scalars.
"""
from dataclasses import dataclass

import numpy as np

from utils.schemas import VehicleParams


@dataclass(frozen=True)
class RoadLoad:
    F_g: float
    F_r: float
    F_a: float

    @property
    def total(self):
        return self.F_g + self.F_r + self.F_a


def resistive_forces(v, phi, p: VehicleParams) -> RoadLoad:
    """Grade, rolling and aerodynamic forces at speed ``v`` on grade ``phi``."""
    v = np.asarray(v, dtype=float)
    phi = np.asarray(phi, dtype=float)
    F_g = p.m * p.g * np.sin(phi)
    F_r = p.mu_r * p.m * p.g * np.cos(phi)
    F_a = 0.5 * p.k_w * v * v
    return RoadLoad(F_g=_scalar(F_g), F_r=_scalar(F_r), F_a=_scalar(F_a))


def acceleration_from_torque(T_m, F_b, v, phi, p: VehicleParams):
    load = resistive_forces(v, phi, p)
    return _scalar((p.n * np.asarray(T_m, dtype=float) - load.total - np.asarray(F_b, dtype=float)) / p.m)


def torque_from_acceleration(a, v, phi, F_b, p: VehicleParams):
    load = resistive_forces(v, phi, p)
    return _scalar((p.m * np.asarray(a, dtype=float) + load.total + np.asarray(F_b, dtype=float)) / p.n)


def motor_speed(v, p: VehicleParams):
    """Shared rotor speed of both motors (rad/s)."""
    return _scalar(p.n * np.asarray(v, dtype=float))


def _scalar(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x
