"""Scenarios, signal plans, preceding-vehicle prediction and prediction noise.

A scenario is the recorded (or generated) trajectory of the preceding vehicle
at a fixed sample time, the signal plan of every intersection on the corridor
and a position-indexed grade profile. Scenarios live on disk as three CSV
files: ``scenario.csv`` (t,d_p,v_p,a_p), ``signals.csv``
(id,d_sig,cycle_s,green_start_s,green_end_s, one row per green window) and
``grade.csv`` (pos_m,phi_rad).
"""
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.models import SignalPhase
from utils.schemas import CorridorConfig, NoiseConfig

logger = logging.getLogger(__name__)

SCENARIO_COLUMNS = ["t", "d_p", "v_p", "a_p"]
SIGNAL_COLUMNS = ["id", "d_sig", "cycle_s", "green_start_s", "green_end_s"]
GRADE_COLUMNS = ["pos_m", "phi_rad"]
CONSISTENCY_TOL = 1e-6


class ScenarioValidationError(ValueError):
    """Malformed or inconsistent scenario input; carries the offending location."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None,
                 source: Optional[str] = None):
        self.row = row
        self.column = column
        self.source = source
        where = []
        if source:
            where.append(source)
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class PredictionRangeError(ValueError):
    pass


@dataclass(frozen=True)
class Intersection:
    """Fixed-time signal at stop line ``d_sig``.

    ``greens`` holds (start, end) offsets within one cycle; an end beyond the
    cycle length wraps into the next cycle.
    """
    id: str
    d_sig: float
    cycle: float
    greens: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if self.cycle <= 0:
            raise ValueError(f"intersection {self.id}: cycle must be positive")
        for start, end in self.greens:
            if not (0 <= start < self.cycle and start < end <= start + self.cycle):
                raise ValueError(f"intersection {self.id}: bad green window ({start}, {end})")

    def green_windows(self, t0: float, t1: float) -> List[Tuple[float, float]]:
        """Merged absolute green intervals intersecting [t0, t1]."""
        windows = []
        k_lo = math.floor(t0 / self.cycle) - 1
        k_hi = math.floor(t1 / self.cycle) + 1
        for k in range(k_lo, k_hi + 1):
            for start, end in self.greens:
                s = k * self.cycle + start
                e = k * self.cycle + end
                if e > t0 and s < t1:
                    windows.append((s, e))
        windows.sort()
        merged: List[List[float]] = []
        for s, e in windows:
            if merged and s <= merged[-1][1] + 1e-12:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        return [(s, e) for s, e in merged]

    def phase_at(self, t: float) -> SignalPhase:
        for s, e in self.green_windows(t - self.cycle, t + self.cycle):
            if s - 1e-9 <= t < e - 1e-9:
                return SignalPhase.GREEN
        return SignalPhase.RED

    def is_red(self, t: float) -> bool:
        return self.phase_at(t) is SignalPhase.RED

    def red_intervals(self, t0: float, t1: float) -> List[Tuple[float, float]]:
        """Red intervals clipped to [t0, t1]."""
        reds = []
        cursor = t0
        for s, e in self.green_windows(t0, t1):
            if s > cursor:
                reds.append((cursor, min(s, t1)))
            cursor = max(cursor, e)
        if cursor < t1:
            reds.append((cursor, t1))
        return reds

    def next_red_onset(self, t: float) -> float:
        """Start of the first red interval beginning after ``t`` (t itself if red now)."""
        if self.is_red(t):
            return t
        for s, e in self.green_windows(t, t + 2 * self.cycle):
            if s <= t + 1e-9 < e:
                return e
        return math.inf

    def schedule(self, duration: float) -> List[Tuple[float, float, SignalPhase]]:
        """Contiguous (t_start, t_end, phase) intervals covering [0, duration]."""
        intervals = []
        cursor = 0.0
        for s, e in self.green_windows(0.0, duration):
            s, e = max(s, 0.0), min(e, duration)
            if s > cursor:
                intervals.append((cursor, s, SignalPhase.RED))
            intervals.append((s, e, SignalPhase.GREEN))
            cursor = e
        if cursor < duration:
            intervals.append((cursor, duration, SignalPhase.RED))
        return intervals


@dataclass(frozen=True)
class GradeProfile:
    """Piecewise-linear road grade over position, constant beyond its ends."""
    positions: np.ndarray = field(default_factory=lambda: np.array([0.0]))
    phi: np.ndarray = field(default_factory=lambda: np.array([0.0]))

    def __call__(self, d):
        value = np.interp(np.asarray(d, dtype=float), self.positions, self.phi)
        return float(value) if np.ndim(value) == 0 else value

    @property
    def is_flat(self) -> bool:
        return bool(np.all(self.phi == 0.0))


@dataclass(frozen=True)
class Scenario:
    t: np.ndarray
    d_p: np.ndarray
    v_p: np.ndarray
    a_p: np.ndarray
    intersections: Tuple[Intersection, ...] = ()
    grade: GradeProfile = field(default_factory=GradeProfile)
    v_max: float = 20.0
    name: str = "scenario"

    @property
    def dt(self) -> float:
        return float((self.t[-1] - self.t[0]) / (len(self.t) - 1))

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def __len__(self) -> int:
        return len(self.t)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.t, "d_p": self.d_p, "v_p": self.v_p, "a_p": self.a_p})

    def preceding_at(self, t: float) -> Tuple[float, float]:
        """Ground-truth (d_p, v_p) at time ``t``; holds the last speed past the end."""
        if t <= self.t[-1]:
            return float(np.interp(t, self.t, self.d_p)), float(np.interp(t, self.t, self.v_p))
        return float(self.d_p[-1] + self.v_p[-1] * (t - self.t[-1])), float(self.v_p[-1])

    def signals_frame(self) -> pd.DataFrame:
        rows = []
        for inter in self.intersections:
            for start, end in inter.greens:
                rows.append({"id": inter.id, "d_sig": inter.d_sig, "cycle_s": inter.cycle,
                             "green_start_s": start, "green_end_s": end})
        return pd.DataFrame(rows, columns=SIGNAL_COLUMNS)

    def grade_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"pos_m": self.grade.positions, "phi_rad": self.grade.phi})


@dataclass(frozen=True)
class PrecedingPrediction:
    """Predicted preceding-vehicle trajectory for k = 0..N."""
    d: np.ndarray
    v: np.ndarray
    a: np.ndarray
    dt: float
    t0: float = 0.0

    @property
    def N(self) -> int:
        return len(self.v) - 1

    def euler_defect(self) -> float:
        if self.N == 0:
            return 0.0
        return float(np.max(np.abs(np.diff(self.d) - self.v[:-1] * self.dt)))


def _integrate_positions(d0: float, v: np.ndarray, dt: float) -> np.ndarray:
    return np.cumsum(np.concatenate(([d0], v[:-1] * dt)))


def _with_speed(pred: PrecedingPrediction, v: np.ndarray) -> PrecedingPrediction:
    """Same start position, new speed profile, positions and accelerations re-derived."""
    d = _integrate_positions(pred.d[0], v, pred.dt)
    a = pred.a.copy()
    if pred.N > 0:
        a[:-1] = np.diff(v) / pred.dt
    return replace(pred, d=d, v=v, a=a)


# --- loading and saving -------------------------------------------------------------

def _read_numeric(path: Path, columns: Sequence[str], text_columns: Sequence[str] = ()) -> pd.DataFrame:
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ScenarioValidationError(f"cannot parse CSV: {e}", source=path.name) from e
    raw.columns = [c.strip() for c in raw.columns]
    missing = [c for c in columns if c not in raw.columns]
    if missing:
        raise ScenarioValidationError(f"missing columns {missing}", row=1, source=path.name)
    frame = pd.DataFrame(index=raw.index)
    for column in columns:
        if column in text_columns:
            frame[column] = raw[column].str.strip()
            continue
        values = pd.to_numeric(raw[column].str.strip(), errors="coerce")
        bad = values.isna()
        if bad.any():
            line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise ScenarioValidationError(
                f"not a number: {raw[column].iloc[line - 2]!r}", row=line, column=column, source=path.name
            )
        # re-parse with exact decimal-to-binary conversion
        frame[column] = [float(x) for x in raw[column].str.strip()]
    return frame


def _validate_samples(frame: pd.DataFrame, source: str) -> None:
    if len(frame) < 2:
        raise ScenarioValidationError("need at least two samples", source=source)
    t = frame["t"].to_numpy()
    d = frame["d_p"].to_numpy()
    v = frame["v_p"].to_numpy()
    # data row i sits on file line i + 2
    steps = np.diff(t)
    bad = np.flatnonzero(steps <= 0)
    if bad.size:
        raise ScenarioValidationError("t not strictly increasing", row=int(bad[0]) + 3, column="t", source=source)
    dt = steps[0]
    bad = np.flatnonzero(np.abs(steps - dt) > CONSISTENCY_TOL)
    if bad.size:
        raise ScenarioValidationError(f"non-uniform sample time (expected {dt})", row=int(bad[0]) + 3,
                                      column="t", source=source)
    bad = np.flatnonzero(v < 0)
    if bad.size:
        raise ScenarioValidationError("negative speed", row=int(bad[0]) + 2, column="v_p", source=source)
    bad = np.flatnonzero(np.diff(d) < -CONSISTENCY_TOL)
    if bad.size:
        raise ScenarioValidationError("position decreases", row=int(bad[0]) + 3, column="d_p", source=source)
    defect = np.abs(np.diff(d) - v[:-1] * steps)
    tol = CONSISTENCY_TOL * np.maximum(1.0, np.abs(d[1:]))
    bad = np.flatnonzero(defect > tol)
    if bad.size:
        raise ScenarioValidationError(
            f"position/speed inconsistent by {defect[bad[0]]:.3g} m", row=int(bad[0]) + 3,
            column="d_p", source=source,
        )


def _load_signals(path: Path) -> Tuple[Intersection, ...]:
    frame = _read_numeric(path, SIGNAL_COLUMNS, text_columns=("id",))
    intersections = []
    for sig_id, group in frame.groupby("id", sort=False):
        if group["d_sig"].nunique() != 1 or group["cycle_s"].nunique() != 1:
            raise ScenarioValidationError(f"intersection {sig_id} has conflicting d_sig/cycle_s",
                                          row=int(group.index[0]) + 2, source=path.name)
        greens = tuple(zip(group["green_start_s"].tolist(), group["green_end_s"].tolist()))
        try:
            intersections.append(Intersection(str(sig_id), float(group["d_sig"].iloc[0]),
                                              float(group["cycle_s"].iloc[0]), greens))
        except ValueError as e:
            raise ScenarioValidationError(str(e), row=int(group.index[0]) + 2, source=path.name) from e
    return tuple(sorted(intersections, key=lambda i: i.d_sig))


def _load_grade(path: Path) -> GradeProfile:
    frame = _read_numeric(path, GRADE_COLUMNS)
    positions = frame["pos_m"].to_numpy()
    if len(positions) == 0:
        return GradeProfile()
    bad = np.flatnonzero(np.diff(positions) <= 0)
    if bad.size:
        raise ScenarioValidationError("pos_m not strictly increasing", row=int(bad[0]) + 3,
                                      column="pos_m", source=path.name)
    return GradeProfile(positions, frame["phi_rad"].to_numpy())


def load_scenario(path: Union[str, Path], signals: Optional[Union[str, Path]] = None,
                  grade: Optional[Union[str, Path]] = None, v_max: float = 20.0) -> Scenario:
    """Load a scenario from a directory of the three CSVs or from explicit files."""
    path = Path(path)
    if path.is_dir():
        directory = path
        path = directory / "scenario.csv"
        if signals is None and (directory / "signals.csv").exists():
            signals = directory / "signals.csv"
        if grade is None and (directory / "grade.csv").exists():
            grade = directory / "grade.csv"
    if not path.exists():
        raise ScenarioValidationError("file not found", source=str(path))

    frame = _read_numeric(path, SCENARIO_COLUMNS)
    _validate_samples(frame, path.name)
    intersections = _load_signals(Path(signals)) if signals is not None else ()
    grade_profile = _load_grade(Path(grade)) if grade is not None else GradeProfile()

    v = frame["v_p"].to_numpy()
    if np.any(v > v_max + 1e-9):
        row = int(np.flatnonzero(v > v_max + 1e-9)[0]) + 2
        raise ScenarioValidationError(f"speed above v_max={v_max}", row=row, column="v_p", source=path.name)

    scenario = Scenario(
        t=frame["t"].to_numpy(),
        d_p=frame["d_p"].to_numpy(),
        v_p=v,
        a_p=frame["a_p"].to_numpy(),
        intersections=intersections,
        grade=grade_profile,
        v_max=v_max,
        name=path.parent.name if path.name == "scenario.csv" else path.stem,
    )
    logger.info("loaded scenario %s: %d samples, %d intersections", scenario.name, len(scenario),
                len(intersections))
    return scenario


def save_scenario(scenario: Scenario, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scenario.to_frame().to_csv(directory / "scenario.csv", index=False)
    scenario.signals_frame().to_csv(directory / "signals.csv", index=False)
    scenario.grade_frame().to_csv(directory / "grade.csv", index=False)
    return directory


# --- synthetic corridor --------------------------------------------------------------

def _idm_acceleration(v: float, v_desired: float, gap: Optional[float], driver) -> float:
    free = 1.0 - (v / v_desired) ** driver.delta
    if gap is None:
        return driver.a_max * free
    desired_gap = driver.jam_distance + max(
        0.0, v * driver.time_headway + v * v / (2.0 * math.sqrt(driver.a_max * driver.b_comf))
    )
    return driver.a_max * (free - (desired_gap / max(gap, 0.1)) ** 2)


def generate_corridor_scenario(seed: int, config: Optional[CorridorConfig] = None) -> Scenario:
    """Leader driving an intelligent-driver law through fixed-time signals.

    The leader fixes its go/stop choice ``commit_time`` seconds before red,
    goes only if the stop line is reachable at its current speed, and never
    crosses a stop line during red.
    """
    cfg = config or CorridorConfig()
    driver = cfg.driver
    rng = np.random.default_rng(seed)

    intersections = []
    green = cfg.green_fraction * cfg.cycle
    for i in range(cfg.n_intersections):
        offset = float(rng.uniform(0.0, cfg.cycle))
        intersections.append(Intersection(
            id=f"I{i + 1}",
            d_sig=cfg.first_signal + i * cfg.spacing,
            cycle=cfg.cycle,
            greens=((offset, offset + green),),
        ))

    n_steps = int(round(cfg.duration / cfg.dt))
    t = np.arange(n_steps + 1) * cfg.dt
    d = np.zeros(n_steps + 1)
    v = np.zeros(n_steps + 1)
    d[0] = cfg.initial_position
    v[0] = min(float(rng.uniform(cfg.initial_speed_min, cfg.initial_speed_max)), cfg.v_max)

    v_cap = min(cfg.v_max, driver.v_desired_max)
    v_desired = min(float(rng.uniform(driver.v_desired_min, driver.v_desired_max)), cfg.v_max)
    redraw_every = max(1, int(round(driver.redraw_interval / cfg.dt)))
    decisions: Dict[Tuple[str, float], bool] = {}

    for k in range(n_steps):
        if k > 0 and k % redraw_every == 0:
            v_desired = min(float(rng.uniform(driver.v_desired_min, driver.v_desired_max)), v_cap)

        stop_line = None
        stop_sig = None
        committed_go = False
        for inter in intersections:
            if inter.d_sig <= d[k]:
                continue
            if inter.is_red(t[k]):
                stop = True
            else:
                onset = inter.next_red_onset(t[k])
                if onset - t[k] > driver.commit_time:
                    continue
                key = (inter.id, round(onset, 6))
                if key not in decisions:
                    decisions[key] = inter.d_sig - d[k] <= v[k] * (onset - t[k])
                stop = not decisions[key]
                committed_go = committed_go or decisions[key]
            if stop:
                stop_sig = inter.d_sig
                stop_line = stop_sig - cfg.stop_margin
                break

        gap = None if stop_line is None else stop_line - d[k]
        a = _idm_acceleration(v[k], v_desired, gap, driver)
        if stop_line is not None:
            room = gap - v[k] * cfg.dt
            if room > 0 and v[k] > 0:
                a_kin = -v[k] ** 2 / (2.0 * room)
                if a_kin < -driver.b_comf:
                    a = min(a, a_kin)
            # never roll across the line during red
            limit = stop_sig - 0.5 * cfg.stop_margin
            if d[k] + v[k] * cfg.dt > limit:
                v[k] = max(0.0, (limit - d[k]) / cfg.dt)
        elif committed_go:
            a = max(a, 0.0)
        a = max(a, -driver.b_max)

        d[k + 1] = d[k] + v[k] * cfg.dt
        v[k + 1] = min(max(v[k] + a * cfg.dt, 0.0), cfg.v_max)

    a_p = np.zeros(n_steps + 1)
    a_p[:-1] = np.diff(v) / cfg.dt
    scenario = Scenario(t=t, d_p=d, v_p=v, a_p=a_p, intersections=tuple(intersections),
                        v_max=cfg.v_max, name=f"corridor_seed{seed}")
    logger.info("generated corridor scenario seed=%d: %.0f s, %.0f m", seed, cfg.duration, d[-1] - d[0])
    return scenario


# --- prediction ----------------------------------------------------------------------

def predict_preceding(s: Scenario, t0: float, N: int, dt: float) -> PrecedingPrediction:
    """Ideal prediction: the ground-truth slice, extended at constant speed past the data."""
    if abs(dt - s.dt) > 1e-9:
        raise ValueError(f"prediction step {dt} differs from scenario step {s.dt}")
    if t0 < s.t[0] - 1e-9 or t0 > s.t[-1] + 1e-9:
        raise PredictionRangeError(f"t0={t0} outside scenario time [{s.t[0]}, {s.t[-1]}]")
    k0 = int(round((t0 - s.t[0]) / dt))
    last = len(s.t) - 1
    idx = k0 + np.arange(N + 1)
    inside = idx <= last
    clipped = np.minimum(idx, last)

    v = s.v_p[clipped].copy()
    a = s.a_p[clipped].copy()
    d = s.d_p[clipped].copy()
    if not np.all(inside):
        first_out = int(np.argmin(inside))
        a[first_out:] = 0.0
        tail = np.cumsum(np.full(N + 1 - first_out, s.v_p[last] * dt))
        d[first_out:] = s.d_p[last] + tail
    return PrecedingPrediction(d=d, v=v, a=a, dt=dt, t0=t0)


def inject_gaussian_accel_noise(pred: PrecedingPrediction, sigma: float, mu: float,
                                rng, clamp: bool = True) -> PrecedingPrediction:
    """Add i.i.d. N(mu, sigma^2) to the predicted acceleration and integrate.

    The speed error after k steps is a random walk with variance
    sigma^2 * k * dt^2. Speeds are clamped at zero unless ``clamp`` is False.
    """
    if sigma == 0.0 and mu == 0.0:
        return pred
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    noise = rng.normal(mu, sigma, size=pred.N)
    v = pred.v.copy()
    v[1:] = pred.v[1:] + np.cumsum(noise) * pred.dt
    if clamp:
        v = np.maximum(v, 0.0)
    return _with_speed(pred, v)


def inject_phase_shift(pred: PrecedingPrediction, N_s: int) -> PrecedingPrediction:
    """Shift the predicted speed by ``N_s`` steps, padding with the boundary value."""
    if N_s == 0:
        return pred
    if abs(N_s) >= pred.N:
        raise ValueError(f"|N_s|={abs(N_s)} must be below the horizon length {pred.N}")
    idx = np.clip(np.arange(pred.N + 1) + N_s, 0, pred.N)
    return _with_speed(pred, pred.v[idx])


def sample_shift(cfg: NoiseConfig, rng: np.random.Generator, dt: float) -> int:
    half = int(math.floor(cfg.P_s / (2.0 * dt) + 1e-9))
    if half == 0:
        return 0
    return int(rng.integers(-half, half + 1))


def perturb_prediction(pred: PrecedingPrediction, cfg: NoiseConfig,
                       rng: np.random.Generator) -> Tuple[PrecedingPrediction, int]:
    """Apply the configured phase shift and Gaussian noise; returns the shift used."""
    N_s = sample_shift(cfg, rng, pred.dt)
    if pred.N > 1:
        N_s = int(np.clip(N_s, -(pred.N - 1), pred.N - 1))
    else:
        N_s = 0
    if cfg.shift_first:
        noisy = inject_gaussian_accel_noise(inject_phase_shift(pred, N_s), cfg.sigma, cfg.mu, rng)
    else:
        noisy = inject_phase_shift(inject_gaussian_accel_noise(pred, cfg.sigma, cfg.mu, rng), N_s)
    return noisy, N_s
