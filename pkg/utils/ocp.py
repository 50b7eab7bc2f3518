"""Finite-horizon eco-driving problem transcribed by direct multiple shooting.

Decision vector layout, stage-interleaved with stride 9::

    [d_0, v_0, soc_0, T_f0, T_r0, P_0, F_b0, s1_0, s2_0,  d_1, v_1, ...,  d_N, v_N, soc_N]

so its dimension is 3(N+1) + 6N. Equality rows are, in order: initial state
(3), position defects (N), speed defects (N), SOC defects (N), power coupling
(N). Inequalities are written g(z) >= 0, grouped family by family (N rows
each) and followed by signal rows. ``OcpProblem.registry`` lists every
family with its rows.

Rows are scaled so residuals are O(1): SOC defects are expressed in amperes,
power coupling and torque envelopes in kW, the side-slip product in
(100 N*m)^2.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from utils.battery import battery_current, current_derivatives, soc_step
from utils.models import SignalMode, VehicleState
from utils.powertrain import Powertrain
from utils.schemas import BatteryParams, OcpConfig, VehicleParams
from utils.traffic import Intersection, PrecedingPrediction

logger = logging.getLogger(__name__)

STAGE = 9
D, V, SOC, TF, TR, PB, FB, S1, S2 = range(STAGE)
STATE_FIELDS = ("d", "v", "soc")
CONTROL_FIELDS = ("T_f", "T_r", "P_bat", "F_b", "s1", "s2")

DISTANCE_SCALE = 10.0
TORQUE_SCALE = 100.0
POWER_SCALE = 1e4
BRAKE_SCALE = 1e3

POWER_ROW_SCALE = 1e-3
ENVELOPE_ROW_SCALE = 1e-3
SLIP_ROW_SCALE = 1e-4

INEQ_FAMILIES = (
    "car_following_lower",
    "car_following_upper",
    "motor_speed",
    "side_slip",
    "torque_rate_front_up",
    "torque_rate_front_down",
    "torque_rate_rear_up",
    "torque_rate_rear_down",
    "torque_envelope_front_pos",
    "torque_envelope_front_neg",
    "torque_envelope_rear_pos",
    "torque_envelope_rear_neg",
    "accel_min",
    "accel_max",
)


class OcpBuildError(ValueError):
    pass


@dataclass(frozen=True)
class DecisionLayout:
    N: int

    @property
    def dim(self) -> int:
        return STAGE * self.N + 3

    def _states(self, offset: int) -> np.ndarray:
        return STAGE * np.arange(self.N + 1) + offset

    def _controls(self, offset: int) -> np.ndarray:
        return STAGE * np.arange(self.N) + offset

    @property
    def d(self): return self._states(D)

    @property
    def v(self): return self._states(V)

    @property
    def soc(self): return self._states(SOC)

    @property
    def T_f(self): return self._controls(TF)

    @property
    def T_r(self): return self._controls(TR)

    @property
    def P_bat(self): return self._controls(PB)

    @property
    def F_b(self): return self._controls(FB)

    @property
    def s1(self): return self._controls(S1)

    @property
    def s2(self): return self._controls(S2)

    def index_map(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in STATE_FIELDS + CONTROL_FIELDS}

    def unpack(self, z: np.ndarray) -> Dict[str, np.ndarray]:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ValueError(f"decision vector has shape {z.shape}, expected ({self.dim},)")
        return {name: z[idx] for name, idx in self.index_map().items()}

    def pack(self, **fields) -> np.ndarray:
        z = np.zeros(self.dim)
        for name, idx in self.index_map().items():
            z[idx] = fields[name]
        return z


@dataclass(frozen=True)
class DecisionVector:
    layout: DecisionLayout
    z: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.z, dtype=dtype)

    def field(self, name: str) -> np.ndarray:
        return self.z[getattr(self.layout, name)]

    @property
    def d(self): return self.field("d")

    @property
    def v(self): return self.field("v")

    @property
    def soc(self): return self.field("soc")

    @property
    def T_f(self): return self.field("T_f")

    @property
    def T_r(self): return self.field("T_r")

    @property
    def P_bat(self): return self.field("P_bat")

    @property
    def F_b(self): return self.field("F_b")

    @property
    def s1(self): return self.field("s1")

    @property
    def s2(self): return self.field("s2")


@dataclass(frozen=True)
class SignalConstraint:
    """Position constraint for one intersection over the steps in ``steps``.

    WAIT: d_k <= bound; PASS: d_k >= bound. FREE carries no rows.
    """
    intersection_id: str
    d_sig: float
    mode: SignalMode
    steps: Tuple[int, ...] = ()
    bound: float = 0.0


@dataclass(frozen=True)
class ConstraintFamily:
    name: str
    kind: str  # "eq", "ineq" or "bound"
    index: np.ndarray
    scale: float = 1.0
    role: str = ""


@dataclass
class HessianBlocks:
    """Lagrangian Hessian as dense per-stage blocks plus a diagonal remainder."""
    block_index: np.ndarray
    block_values: np.ndarray
    diag_index: np.ndarray
    diag_values: np.ndarray

    def to_sparse(self, n: int) -> sparse.csr_matrix:
        nb, bs = self.block_index.shape
        rows = np.repeat(self.block_index, bs, axis=1).ravel()
        cols = np.tile(self.block_index, (1, bs)).ravel()
        data = self.block_values.reshape(nb, bs * bs).ravel()
        rows = np.concatenate([rows, self.diag_index])
        cols = np.concatenate([cols, self.diag_index])
        data = np.concatenate([data, self.diag_values])
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


class OcpProblem:
    """Smooth NLP for one MPC cycle.

    Implements the solver protocol: ``n``, ``lb``, ``ub``, ``m_eq``, ``m_ineq``,
    ``objective``, ``gradient``, ``eq_constraints``, ``eq_jacobian``,
    ``ineq_constraints``, ``ineq_jacobian``, ``hessian_blocks`` and the
    scaling hints ``variable_scale`` / ``objective_scale``.
    """

    objective_scale = 1e-2

    def __init__(self, x0: VehicleState, pred: PrecedingPrediction, signals: Sequence[SignalConstraint],
                 phi: np.ndarray, vehicle: VehicleParams, battery: BatteryParams, powertrain: Powertrain,
                 cfg: OcpConfig, u_prev: Tuple[float, float] = (0.0, 0.0)):
        N = cfg.N
        if pred.N < N:
            raise OcpBuildError(f"prediction covers {pred.N} steps, horizon needs {N}")
        if abs(pred.dt - cfg.dt) > 1e-9:
            raise OcpBuildError(f"prediction step {pred.dt} differs from OCP step {cfg.dt}")
        if not 0.0 <= x0.v <= vehicle.v_max + 1e-9:
            raise OcpBuildError(f"initial speed {x0.v} outside [0, {vehicle.v_max}]")
        if not battery.soc_min <= x0.soc <= battery.soc_max:
            raise OcpBuildError(f"initial SOC {x0.soc} outside [{battery.soc_min}, {battery.soc_max}]")
        phi = np.broadcast_to(np.asarray(phi, dtype=float), (N,)).copy()

        self.cfg = cfg
        self.N = N
        self.dt = cfg.dt
        self.x0 = x0
        self.pred = pred
        self.signals = tuple(s for s in signals if s.mode is not SignalMode.FREE and s.steps)
        self.all_signals = tuple(signals)
        self.phi = phi
        self.vehicle = vehicle
        self.battery = battery
        self.powertrain = powertrain
        self.u_prev = (float(u_prev[0]), float(u_prev[1]))
        self.layout = DecisionLayout(N)
        self.n = self.layout.dim

        self.dp = np.asarray(pred.d[: N + 1], dtype=float)
        self.vp = np.asarray(pred.v[: N + 1], dtype=float)
        self.road = vehicle.m * vehicle.g * np.sin(phi) + vehicle.mu_r * vehicle.m * vehicle.g * np.cos(phi)
        self.soc_scale = battery.C_bat / cfg.dt
        self.dT = vehicle.dT_max * cfg.dt
        self.p_limit = cfg.battery_power_fraction * battery.max_discharge_power

        self._signal_rows = [(s, k) for s in self.signals for k in s.steps]
        for s, k in self._signal_rows:
            if not 1 <= k <= N:
                raise OcpBuildError(f"signal step {k} outside 1..{N}")

        self.m_eq = 3 + 4 * N
        self.m_ineq = len(INEQ_FAMILIES) * N + len(self._signal_rows)
        self._build_bounds()
        self._build_patterns()
        self.registry = self._build_registry()

    # --- structure ---------------------------------------------------------------------

    def _build_bounds(self) -> None:
        L, v, b, cfg = self.layout, self.vehicle, self.battery, self.cfg
        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)
        lb[L.v[1:]] = 0.0
        ub[L.v[1:]] = v.v_max
        lb[L.soc[1:]] = b.soc_min
        ub[L.soc[1:]] = b.soc_max
        lb[L.T_f] = -self.powertrain.front.T_stall
        ub[L.T_f] = self.powertrain.front.T_stall
        lb[L.T_r] = -self.powertrain.rear.T_stall
        ub[L.T_r] = self.powertrain.rear.T_stall
        lb[L.P_bat] = -self.p_limit
        ub[L.P_bat] = self.p_limit
        lb[L.F_b] = 0.0
        ub[L.F_b] = v.F_b_max
        lb[L.s1] = 0.0
        lb[L.s2] = 0.0
        self.lb = lb
        self.ub = ub

        scale = np.ones(self.n)
        scale[L.d] = DISTANCE_SCALE
        scale[L.T_f] = TORQUE_SCALE
        scale[L.T_r] = TORQUE_SCALE
        scale[L.P_bat] = POWER_SCALE
        scale[L.F_b] = BRAKE_SCALE
        self.variable_scale = scale

    def _build_patterns(self) -> None:
        L, N = self.layout, self.N
        k = np.arange(N)

        eq_rows, eq_cols = [np.arange(3)], [np.array([L.d[0], L.v[0], L.soc[0]])]
        r = 3 + k
        eq_rows += [np.repeat(r, 3)]
        eq_cols += [np.column_stack([L.d[1:], L.d[:-1], L.v[:-1]]).ravel()]
        r = 3 + N + k
        eq_rows += [np.repeat(r, 5)]
        eq_cols += [np.column_stack([L.v[1:], L.v[:-1], L.T_f, L.T_r, L.F_b]).ravel()]
        r = 3 + 2 * N + k
        eq_rows += [np.repeat(r, 3)]
        eq_cols += [np.column_stack([L.soc[1:], L.soc[:-1], L.P_bat]).ravel()]
        r = 3 + 3 * N + k
        eq_rows += [np.repeat(r, 4)]
        eq_cols += [np.column_stack([L.P_bat, L.v[:-1], L.T_f, L.T_r]).ravel()]
        self._eq_pattern = (np.concatenate(eq_rows), np.concatenate(eq_cols))

        def fam(i):
            return i * N + k

        rows, cols = [], []
        rows += [np.repeat(fam(0), 2)]
        cols += [np.column_stack([L.d[1:], L.s1]).ravel()]
        rows += [np.repeat(fam(1), 3)]
        cols += [np.column_stack([L.d[1:], L.v[1:], L.s2]).ravel()]
        rows += [fam(2)]
        cols += [L.v[1:]]
        rows += [np.repeat(fam(3), 2)]
        cols += [np.column_stack([L.T_f, L.T_r]).ravel()]
        for i, idx in ((4, L.T_f), (5, L.T_f), (6, L.T_r), (7, L.T_r)):
            rows += [fam(i), fam(i)[1:]]
            cols += [idx, idx[:-1]]
        for i, idx in ((8, L.T_f), (9, L.T_f), (10, L.T_r), (11, L.T_r)):
            rows += [np.repeat(fam(i), 2)]
            cols += [np.column_stack([L.v[:-1], idx]).ravel()]
        for i in (12, 13):
            rows += [np.repeat(fam(i), 4)]
            cols += [np.column_stack([L.v[:-1], L.T_f, L.T_r, L.F_b]).ravel()]
        base = len(INEQ_FAMILIES) * N
        rows += [base + np.arange(len(self._signal_rows), dtype=int)]
        cols += [np.array([L.d[kk] for _, kk in self._signal_rows], dtype=int)]
        self._ineq_pattern = (np.concatenate(rows), np.concatenate(cols))

        self._signal_sign = np.array(
            [-1.0 if s.mode is SignalMode.WAIT else 1.0 for s, _ in self._signal_rows]
        )
        self._signal_bound = np.array([s.bound for s, _ in self._signal_rows])

    def _build_registry(self) -> List[ConstraintFamily]:
        N, L = self.N, self.layout
        k = np.arange(N)
        reg = [
            ConstraintFamily("initial_state", "eq", np.arange(3), role="x(0) equals the measured state"),
            ConstraintFamily("dynamics_position", "eq", 3 + k, role="d(k+1) = d(k) + dt*v(k)"),
            ConstraintFamily("dynamics_speed", "eq", 3 + N + k, role="v(k+1) = v(k) + dt*a(k)"),
            ConstraintFamily("dynamics_soc", "eq", 3 + 2 * N + k, self.soc_scale,
                             role="soc(k+1) = soc(k) - I(P_bat)*dt/C_bat"),
            ConstraintFamily("power_coupling", "eq", 3 + 3 * N + k, POWER_ROW_SCALE,
                             role="P_bat = p_f(n*v, T_f) + p_r(n*v, T_r)"),
        ]
        scales = {"motor_speed": 1.0 / self.vehicle.n, "side_slip": SLIP_ROW_SCALE}
        for i, name in enumerate(INEQ_FAMILIES):
            s = ENVELOPE_ROW_SCALE if name.startswith("torque_envelope") else scales.get(name, 1.0)
            reg.append(ConstraintFamily(name, "ineq", i * N + k, s))
        reg.append(ConstraintFamily("signal", "ineq", len(INEQ_FAMILIES) * N + np.arange(len(self._signal_rows))))
        reg += [
            ConstraintFamily("speed_limit", "bound", L.v[1:], role="0 <= v <= v_max"),
            ConstraintFamily("soc_window", "bound", L.soc[1:], role="soc_min <= soc <= soc_max"),
            ConstraintFamily("brake_force", "bound", L.F_b, role="0 <= F_b <= F_b_max"),
            ConstraintFamily("stall_torque_front", "bound", L.T_f),
            ConstraintFamily("stall_torque_rear", "bound", L.T_r),
            ConstraintFamily("battery_power", "bound", L.P_bat),
            ConstraintFamily("slack_nonneg", "bound", np.concatenate([L.s1, L.s2])),
        ]
        return reg

    # --- shared pieces -----------------------------------------------------------------

    def _split(self, z):
        return self.layout.unpack(z)

    def _accel(self, v, T_f, T_r, F_b):
        p = self.vehicle
        return (p.n * (T_f + T_r) - self.road - 0.5 * p.k_w * v * v - F_b) / p.m

    def acceleration(self, z) -> np.ndarray:
        x = self._split(z)
        return self._accel(x["v"][:-1], x["T_f"], x["T_r"], x["F_b"])

    def _current(self, P):
        b = self.battery
        disc = np.maximum(b.U_oc ** 2 - 4.0 * P * b.R_b, 1e-12)
        return 2.0 * P / (b.U_oc + np.sqrt(disc))

    # --- cost --------------------------------------------------------------------------

    def cost_terms(self, z) -> Dict[str, float]:
        x = self._split(z)
        c = self.cfg
        a = self._accel(x["v"][:-1], x["T_f"], x["T_r"], x["F_b"])
        J_p = float(np.sum(c.w1 * a * a + c.w2 * x["P_bat"]))
        J_t = 0.0
        if c.use_terminal_gap:
            gap_err = self.dp[-1] - x["d"][-1] - c.h_head * self.vp[-1] - c.d_min
            J_t += c.w3 * gap_err ** 2
        if c.use_terminal_speed:
            J_t += c.w4 * (x["v"][-1] - self.vp[-1]) ** 2
        J_f = float(np.sum(c.w5 * x["s1"] ** 2 + c.w6 * x["s2"] ** 2))
        return {"J_p": J_p, "J_t": float(J_t), "J_f": J_f}

    def objective(self, z) -> float:
        return float(sum(self.cost_terms(z).values()))

    def gradient(self, z) -> np.ndarray:
        x = self._split(z)
        c, p, L = self.cfg, self.vehicle, self.layout
        v = x["v"][:-1]
        a = self._accel(v, x["T_f"], x["T_r"], x["F_b"])
        g = np.zeros(self.n)
        two_w1a = 2.0 * c.w1 * a
        g[L.v[:-1]] += two_w1a * (-p.k_w * v / p.m)
        g[L.T_f] += two_w1a * p.n / p.m
        g[L.T_r] += two_w1a * p.n / p.m
        g[L.F_b] += -two_w1a / p.m
        g[L.P_bat] += c.w2
        if c.use_terminal_gap:
            gap_err = self.dp[-1] - x["d"][-1] - c.h_head * self.vp[-1] - c.d_min
            g[L.d[-1]] += -2.0 * c.w3 * gap_err
        if c.use_terminal_speed:
            g[L.v[-1]] += 2.0 * c.w4 * (x["v"][-1] - self.vp[-1])
        g[L.s1] += 2.0 * c.w5 * x["s1"]
        g[L.s2] += 2.0 * c.w6 * x["s2"]
        return g

    # --- equalities --------------------------------------------------------------------

    def eq_constraints(self, z) -> np.ndarray:
        x = self._split(z)
        d, v, soc = x["d"], x["v"], x["soc"]
        a = self._accel(v[:-1], x["T_f"], x["T_r"], x["F_b"])
        omega = self.vehicle.n * v[:-1]
        power = self.powertrain.power(x["T_f"], x["T_r"], omega)
        return np.concatenate([
            [d[0] - self.x0.d, v[0] - self.x0.v, self.soc_scale * (soc[0] - self.x0.soc)],
            d[1:] - d[:-1] - self.dt * v[:-1],
            v[1:] - v[:-1] - self.dt * a,
            self.soc_scale * (soc[1:] - soc[:-1]) + self._current(x["P_bat"]),
            POWER_ROW_SCALE * (x["P_bat"] - power),
        ])

    def eq_jacobian(self, z) -> sparse.csr_matrix:
        x = self._split(z)
        p, N, dt = self.vehicle, self.N, self.dt
        v = x["v"][:-1]
        omega = p.n * v
        fw, fT = self.powertrain.poly_f.gradient(omega, x["T_f"])
        rw, rT = self.powertrain.poly_r.gradient(omega, x["T_r"])
        dI, _ = current_derivatives(np.minimum(x["P_bat"], self.battery.max_discharge_power * (1 - 1e-12)),
                                    self.battery)
        ones = np.ones(N)
        data = np.concatenate([
            [1.0, 1.0, self.soc_scale],
            np.column_stack([ones, -ones, -dt * ones]).ravel(),
            np.column_stack([
                ones, -1.0 + dt * p.k_w * v / p.m,
                -dt * p.n / p.m * ones, -dt * p.n / p.m * ones, dt / p.m * ones,
            ]).ravel(),
            np.column_stack([self.soc_scale * ones, -self.soc_scale * ones, dI]).ravel(),
            POWER_ROW_SCALE * np.column_stack([ones, -p.n * (fw + rw), -fT, -rT]).ravel(),
        ])
        rows, cols = self._eq_pattern
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.m_eq, self.n))

    # --- inequalities ------------------------------------------------------------------

    def ineq_constraints(self, z) -> np.ndarray:
        x = self._split(z)
        c, p, pt = self.cfg, self.vehicle, self.powertrain
        d, v = x["d"], x["v"]
        T_f, T_r = x["T_f"], x["T_r"]
        dTf = T_f - np.concatenate(([self.u_prev[0]], T_f[:-1]))
        dTr = T_r - np.concatenate(([self.u_prev[1]], T_r[:-1]))
        nvTf = p.n * v[:-1] * T_f
        nvTr = p.n * v[:-1] * T_r
        a = self._accel(v[:-1], T_f, T_r, x["F_b"])
        d_sig_rows = d[[k for _, k in self._signal_rows]] if self._signal_rows else np.zeros(0)
        return np.concatenate([
            d[1:] - self.dp[1:] + c.d_max + x["s1"],
            self.dp[1:] - c.d_min - c.h_min * v[1:] + x["s2"] - d[1:],
            pt.omega_max / p.n - v[1:],
            SLIP_ROW_SCALE * T_f * T_r,
            self.dT - dTf,
            self.dT + dTf,
            self.dT - dTr,
            self.dT + dTr,
            ENVELOPE_ROW_SCALE * (pt.front.P_rated - nvTf),
            ENVELOPE_ROW_SCALE * (pt.front.P_rated + nvTf),
            ENVELOPE_ROW_SCALE * (pt.rear.P_rated - nvTr),
            ENVELOPE_ROW_SCALE * (pt.rear.P_rated + nvTr),
            a - p.a_min,
            p.a_max - a,
            self._signal_sign * (d_sig_rows - self._signal_bound),
        ])

    def ineq_jacobian(self, z) -> sparse.csr_matrix:
        x = self._split(z)
        c, p, N = self.cfg, self.vehicle, self.N
        v = x["v"][:-1]
        T_f, T_r = x["T_f"], x["T_r"]
        ones = np.ones(N)
        e = ENVELOPE_ROW_SCALE * p.n
        da = np.column_stack([-p.k_w * v / p.m, p.n / p.m * ones, p.n / p.m * ones, -ones / p.m]).ravel()
        data = [
            np.column_stack([ones, ones]).ravel(),
            np.column_stack([-ones, -c.h_min * ones, ones]).ravel(),
            -ones,
            SLIP_ROW_SCALE * np.column_stack([T_r, T_f]).ravel(),
        ]
        for sign in (-1.0, 1.0, -1.0, 1.0):
            data += [sign * ones, -sign * ones[1:]]
        for sign, T in ((-1.0, T_f), (1.0, T_f), (-1.0, T_r), (1.0, T_r)):
            data += [sign * e * np.column_stack([T, v]).ravel()]
        data += [da, -da, self._signal_sign]
        rows, cols = self._ineq_pattern
        return sparse.csr_matrix((np.concatenate(data), (rows, cols)), shape=(self.m_ineq, self.n))

    # --- second order ------------------------------------------------------------------

    def hessian_blocks(self, z, obj_factor: float, lam_eq: np.ndarray, lam_ineq: np.ndarray) -> HessianBlocks:
        """Hessian of obj_factor*J - lam_eq.c_eq - lam_ineq.c_ineq.

        Nonlinear terms only couple (v_k, T_f,k, T_r,k, P_k, F_b,k) of the same
        stage; d_N, v_N and the slacks carry diagonal curvature.
        """
        x = self._split(z)
        c, p, L, N = self.cfg, self.vehicle, self.layout, self.N
        v = x["v"][:-1]
        T_f, T_r, P = x["T_f"], x["T_r"], x["P_bat"]
        a = self._accel(v, T_f, T_r, x["F_b"])
        omega = p.n * v

        lam_v = lam_eq[3 + N: 3 + 2 * N]
        lam_s = lam_eq[3 + 2 * N: 3 + 3 * N]
        lam_p = lam_eq[3 + 3 * N: 3 + 4 * N]
        mu = [lam_ineq[i * N:(i + 1) * N] for i in range(len(INEQ_FAMILIES))]

        ga = np.column_stack([-p.k_w * v / p.m, p.n / p.m * np.ones(N), p.n / p.m * np.ones(N),
                              np.zeros(N), -np.ones(N) / p.m])
        H = 2.0 * obj_factor * c.w1 * ga[:, :, None] * ga[:, None, :]
        kw_m = p.k_w / p.m
        vv = (2.0 * obj_factor * c.w1 * a * (-kw_m)
              - lam_v * self.dt * kw_m
              + mu[12] * kw_m - mu[13] * kw_m)

        f_ww, f_wT, f_TT = self.powertrain.poly_f.hessian(omega, T_f)
        r_ww, r_wT, r_TT = self.powertrain.poly_r.hessian(omega, T_r)
        rho = POWER_ROW_SCALE * lam_p
        vv = vv + rho * p.n ** 2 * (f_ww + r_ww)
        v_tf = rho * p.n * f_wT + ENVELOPE_ROW_SCALE * p.n * (mu[8] - mu[9])
        v_tr = rho * p.n * r_wT + ENVELOPE_ROW_SCALE * p.n * (mu[10] - mu[11])
        tf_tr = -SLIP_ROW_SCALE * mu[3]

        P_safe = np.minimum(P, self.battery.max_discharge_power * (1 - 1e-12))
        _, d2I = current_derivatives(P_safe, self.battery)

        H[:, 0, 0] += vv
        H[:, 0, 1] += v_tf
        H[:, 1, 0] += v_tf
        H[:, 0, 2] += v_tr
        H[:, 2, 0] += v_tr
        H[:, 1, 1] += rho * f_TT
        H[:, 2, 2] += rho * r_TT
        H[:, 1, 2] += tf_tr
        H[:, 2, 1] += tf_tr
        H[:, 3, 3] += -lam_s * d2I

        block_index = np.column_stack([L.v[:-1], L.T_f, L.T_r, L.P_bat, L.F_b])
        diag_index = np.concatenate([[L.d[-1], L.v[-1]], L.s1, L.s2])
        diag_values = np.concatenate([
            [2.0 * obj_factor * c.w3 if c.use_terminal_gap else 0.0,
             2.0 * obj_factor * c.w4 if c.use_terminal_speed else 0.0],
            np.full(N, 2.0 * obj_factor * c.w5),
            np.full(N, 2.0 * obj_factor * c.w6),
        ])
        return HessianBlocks(block_index, H, diag_index, diag_values)

    def lagrangian_hessian(self, z, obj_factor, lam_eq, lam_ineq) -> sparse.csr_matrix:
        return self.hessian_blocks(z, obj_factor, lam_eq, lam_ineq).to_sparse(self.n)

    # --- diagnostics -------------------------------------------------------------------

    def family(self, name: str) -> ConstraintFamily:
        for fam in self.registry:
            if fam.name == name:
                return fam
        raise KeyError(name)

    def violation_by_family(self, z) -> Dict[str, float]:
        """Largest scaled violation of every registered family."""
        z = np.asarray(z, dtype=float)
        ce, ci = self.eq_constraints(z), self.ineq_constraints(z)
        out = {}
        for fam in self.registry:
            if fam.kind == "eq":
                out[fam.name] = float(np.max(np.abs(ce[fam.index]), initial=0.0))
            elif fam.kind == "ineq":
                out[fam.name] = float(np.max(-ci[fam.index], initial=0.0))
            else:
                lo = self.lb[fam.index] - z[fam.index]
                hi = z[fam.index] - self.ub[fam.index]
                out[fam.name] = float(max(np.max(lo, initial=0.0), np.max(hi, initial=0.0)))
        return out

    def dump(self, path: Union[str, Path]) -> None:
        """Write dimensions, bound summary and sparsity counts as text."""
        z = warm_start(self).z
        je, ji = self.eq_jacobian(z), self.ineq_jacobian(z)
        lines = [
            f"N = {self.N}",
            f"dt = {self.dt}",
            f"n = {self.n}",
            f"m_eq = {self.m_eq}",
            f"m_ineq = {self.m_ineq}",
            f"nnz_eq_jacobian = {je.nnz}",
            f"nnz_ineq_jacobian = {ji.nnz}",
            f"finite_lower_bounds = {int(np.isfinite(self.lb).sum())}",
            f"finite_upper_bounds = {int(np.isfinite(self.ub).sum())}",
        ]
        for fam in self.registry:
            lines.append(f"family {fam.name} kind={fam.kind} count={len(fam.index)} scale={fam.scale:g}")
        for name, idx in self.layout.index_map().items():
            lines.append(f"bounds {name}: [{np.min(self.lb[idx]):g}, {np.max(self.ub[idx]):g}]")
        Path(path).write_text("\n".join(lines) + "\n")


def build_ocp(x0: VehicleState, pred: PrecedingPrediction, signals: Sequence[SignalConstraint],
              grade, vehicle: VehicleParams, battery: BatteryParams, powertrain: Powertrain,
              cfg: OcpConfig, u_prev: Tuple[float, float] = (0.0, 0.0),
              positions: Optional[np.ndarray] = None) -> OcpProblem:
    """Transcribe one MPC cycle.

    ``grade`` is a callable position -> rad (or a constant); it is sampled along
    ``positions`` (default: constant-speed positions from ``x0``).
    """
    if positions is None:
        positions = x0.d + x0.v * cfg.dt * np.arange(cfg.N)
    phi = grade(positions) if callable(grade) else np.full(cfg.N, float(grade))
    return OcpProblem(x0, pred, signals, phi, vehicle, battery, powertrain, cfg, u_prev)


@dataclass
class Evaluation:
    J: float
    eq: np.ndarray
    ineq: np.ndarray
    gradient: np.ndarray
    eq_jacobian: sparse.csr_matrix
    ineq_jacobian: sparse.csr_matrix
    terms: Dict[str, float] = field(default_factory=dict)


def evaluate(problem: OcpProblem, z) -> Evaluation:
    z = np.asarray(z, dtype=float)
    if z.shape != (problem.n,):
        raise ValueError(f"decision vector has shape {z.shape}, expected ({problem.n},)")
    terms = problem.cost_terms(z)
    return Evaluation(
        J=float(sum(terms.values())),
        eq=problem.eq_constraints(z),
        ineq=problem.ineq_constraints(z),
        gradient=problem.gradient(z),
        eq_jacobian=problem.eq_jacobian(z),
        ineq_jacobian=problem.ineq_jacobian(z),
        terms=terms,
    )


# --- initial guesses ---------------------------------------------------------------------

def _coast_rollout(problem: OcpProblem, k0: int, d0: float, v0: float, soc0: float,
                   fields: Dict[str, np.ndarray]) -> None:
    """Fill steps k0..N with a constant-speed profile and a 1:1 torque split."""
    from utils.baseline_metrics import SplitRatio, rule_based_split

    p, pt, N, dt = problem.vehicle, problem.powertrain, problem.N, problem.dt
    d, v, soc = d0, v0, soc0
    for k in range(k0, N):
        fields["d"][k], fields["v"][k], fields["soc"][k] = d, v, soc
        omega = min(p.n * v, pt.omega_max)
        T_d = (problem.road[k] + 0.5 * p.k_w * v * v) / p.n
        f_max, r_max = pt.torque_limits(omega)
        T_d = float(np.clip(T_d, -(f_max + r_max), f_max + r_max))
        T_f, T_r = rule_based_split(T_d, SplitRatio(1.0, 1.0), omega, pt)
        P = float(np.clip(pt.power(T_f, T_r, omega), -problem.p_limit, problem.p_limit))
        fields["T_f"][k], fields["T_r"][k], fields["P_bat"][k] = T_f, T_r, P
        fields["F_b"][k] = 0.0
        a = problem._accel(v, T_f, T_r, 0.0)[k]
        current = battery_current(P, problem.battery)
        d, v, soc = d + dt * v, v + dt * a, soc_step(soc, current, dt, problem.battery)
    fields["d"][N], fields["v"][N], fields["soc"][N] = d, v, soc


def _fill_slacks(problem: OcpProblem, fields: Dict[str, np.ndarray]) -> None:
    c = problem.cfg
    d, v = fields["d"][1:], fields["v"][1:]
    fields["s1"] = np.maximum(0.0, problem.dp[1:] - c.d_max - d)
    fields["s2"] = np.maximum(0.0, d - problem.dp[1:] + c.d_min + c.h_min * v)


def warm_start(problem: OcpProblem, prev: Optional[DecisionVector] = None, shift: int = 0) -> DecisionVector:
    """Initial guess: the previous plan shifted by ``shift`` steps, or a cold start.

    The tail beyond the shifted plan (or the whole horizon on a cold start)
    holds the speed it starts from with a 1:1 torque split, integrated with
    the model so the dynamics defects vanish.
    """
    L, N, x0 = problem.layout, problem.N, problem.x0
    fields = {
        "d": np.zeros(N + 1), "v": np.zeros(N + 1), "soc": np.zeros(N + 1),
        "T_f": np.zeros(N), "T_r": np.zeros(N), "P_bat": np.zeros(N), "F_b": np.zeros(N),
        "s1": np.zeros(N), "s2": np.zeros(N),
    }
    if prev is None or prev.layout.N != N or shift >= N:
        _coast_rollout(problem, 0, x0.d, x0.v, x0.soc, fields)
    else:
        keep = N - shift
        for name in STATE_FIELDS:
            fields[name][: keep + 1] = prev.field(name)[shift:]
        for name in ("T_f", "T_r", "P_bat", "F_b"):
            fields[name][:keep] = prev.field(name)[shift:]
        fields["d"][0], fields["v"][0], fields["soc"][0] = x0.d, x0.v, x0.soc
        v_tail = float(np.clip(fields["v"][keep], 0.0, problem.vehicle.v_max))
        _coast_rollout(problem, keep, fields["d"][keep], v_tail, fields["soc"][keep], fields)
    _fill_slacks(problem, fields)
    return DecisionVector(L, L.pack(**fields))


# --- signal handling ---------------------------------------------------------------------

def _reach_distance(v0: float, accel: float, v_max: float, tau: float) -> float:
    """Distance covered in ``tau`` seconds accelerating at ``accel`` up to ``v_max``."""
    if tau <= 0:
        return 0.0
    if v0 >= v_max:
        return v_max * tau
    t_acc = (v_max - v0) / accel
    if tau <= t_acc:
        return v0 * tau + 0.5 * accel * tau * tau
    return v0 * t_acc + 0.5 * accel * t_acc * t_acc + v_max * (tau - t_acc)


def _red_end(inter: Intersection, onset: float) -> float:
    for s, _ in inter.green_windows(onset, onset + 2 * inter.cycle):
        if s > onset + 1e-9:
            return s
    return math.inf


def plan_signal_constraints(x0: VehicleState, t0: float, pred: PrecedingPrediction,
                            intersections: Sequence[Intersection], cfg: OcpConfig,
                            vehicle: VehicleParams,
                            commitments: Optional[Dict[Tuple[str, float], SignalMode]] = None,
                            pass_accel_fraction: float = 0.5,
                            comfort_decel: float = 2.5) -> List[SignalConstraint]:
    """Choose pass / wait / free for each intersection the horizon can reach.

    PASS requires reaching the stop line before red onset at a conservative
    acceleration and a preceding vehicle that clears the line with headway to
    spare. A PASS chosen for a red onset is kept unless a comfortable stop is
    still possible.
    """
    if commitments is None:
        commitments = {}
    N, dt = cfg.N, cfg.dt
    horizon_end = t0 + N * dt
    reach = x0.d + vehicle.v_max * N * dt
    stop_point = x0.d + x0.v * dt + x0.v ** 2 / (2.0 * abs(vehicle.a_min))
    out = []
    for inter in sorted(intersections, key=lambda i: i.d_sig):
        if inter.d_sig <= x0.d + 1e-6 or inter.d_sig > reach:
            continue
        onset = inter.next_red_onset(t0)
        if onset >= horizon_end:
            out.append(SignalConstraint(inter.id, inter.d_sig, SignalMode.FREE))
            continue
        key = (inter.id, round(onset, 6))
        red_end = _red_end(inter, onset)
        tau = onset - t0
        k_onset = max(1, int(math.ceil(tau / dt - 1e-9)))
        red_steps = tuple(k for k in range(k_onset, N + 1) if t0 + k * dt < red_end - 1e-9)
        target = inter.d_sig + cfg.pass_margin

        comfortable = x0.d + x0.v * dt + x0.v ** 2 / (2.0 * comfort_decel) <= inter.d_sig - cfg.d_stop_margin
        if tau <= 1e-9:
            mode = SignalMode.WAIT
        elif commitments.get(key) is SignalMode.PASS and not comfortable:
            mode = SignalMode.PASS
        else:
            ego_ok = x0.d + _reach_distance(x0.v, pass_accel_fraction * vehicle.a_max, vehicle.v_max, tau) >= target
            clear = inter.d_sig + cfg.d_min + cfg.h_min * vehicle.v_max
            pred_ok = min(pred.d[min(k_onset, pred.N)], pred.d[0] + pred.v[0] * tau) >= clear
            mode = SignalMode.PASS if ego_ok and pred_ok else SignalMode.WAIT

        if mode is SignalMode.WAIT and stop_point >= inter.d_sig:
            if x0.d + _reach_distance(x0.v, vehicle.a_max, vehicle.v_max, tau) >= target:
                mode = SignalMode.PASS
            else:
                logger.warning("intersection %s: cannot stop before the line nor clear it before red at t=%.1f",
                               inter.id, t0)
                out.append(SignalConstraint(inter.id, inter.d_sig, SignalMode.FREE))
                continue

        commitments[key] = mode
        if mode is SignalMode.PASS:
            out.append(SignalConstraint(inter.id, inter.d_sig, mode, (k_onset,), target))
        else:
            bound = max(inter.d_sig - cfg.d_stop_margin, min(stop_point + 0.01, inter.d_sig - 1e-3))
            out.append(SignalConstraint(inter.id, inter.d_sig, mode, red_steps, bound))
    return out
