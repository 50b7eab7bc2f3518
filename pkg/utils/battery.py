"""Equivalent-resistance battery and SOC integration."""
import logging
from typing import Callable

import numpy as np

from utils.schemas import BatteryParams

logger = logging.getLogger(__name__)

# Per-cycle parameter update, (t, current params) -> params for the next horizon.
BmsHook = Callable[[float, BatteryParams], BatteryParams]


class PowerExceedsBatteryLimit(ValueError):
    """Requested power is above U_oc^2 / (4 R_b); no real current exists."""

    def __init__(self, P_bat: float, limit: float):
        self.P_bat = P_bat
        self.limit = limit
        super().__init__(f"battery power {P_bat:.1f} W exceeds limit {limit:.1f} W")


def _discriminant(P_bat, b: BatteryParams):
    return b.U_oc * b.U_oc - 4.0 * np.asarray(P_bat, dtype=float) * b.R_b


def battery_current(P_bat, b: BatteryParams):
    """Terminal current drawn for battery-side power ``P_bat`` (negative charges).

    Uses the cancellation-free form 2P / (U + sqrt(U^2 - 4PR)) of the
    small-root solution.
    """
    disc = _discriminant(P_bat, b)
    if np.any(disc < 0):
        worst = float(np.max(P_bat))
        raise PowerExceedsBatteryLimit(worst, b.max_discharge_power)
    current = 2.0 * np.asarray(P_bat, dtype=float) / (b.U_oc + np.sqrt(disc))
    return float(current) if current.ndim == 0 else current


def current_derivatives(P_bat, b: BatteryParams):
    """dI/dP and d2I/dP2; callers guarantee the discriminant is positive."""
    disc = _discriminant(P_bat, b)
    root = np.sqrt(disc)
    return 1.0 / root, 2.0 * b.R_b / (disc * root)


def soc_step(soc, current, dt: float, b: BatteryParams):
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return soc - current * dt / b.C_bat


def terminal_power(current, b: BatteryParams):
    """Battery-side power reconstructed from current."""
    return b.U_oc * current - current * current * b.R_b


def constant_bms(t: float, params: BatteryParams) -> BatteryParams:
    return params
