"""Primal-dual interior-point solver for smooth, sparse NLPs.

Problems follow a small protocol (``n``, ``lb``, ``ub``, ``m_eq``, ``m_ineq``,
``objective``, ``gradient``, ``eq_constraints``, ``eq_jacobian``,
``ineq_constraints``, ``ineq_jacobian``) with equalities c_E(z) = 0 and
inequalities c_I(z) >= 0. Second-order information comes from
``hessian_blocks`` or ``lagrangian_hessian`` when the problem has one, from a
damped BFGS approximation otherwise. Optional ``variable_scale`` and
``objective_scale`` attributes define the space the iteration runs in:
y = z / variable_scale, objective multiplied by objective_scale.

The Lagrangian convention is L = f - lam_eq.c_E - lam_ineq.c_I
- z_L.(z - lb) - z_U.(ub - z) with lam_ineq, z_L, z_U >= 0. Multipliers
returned in ``Solution`` belong to the scaled problem.
"""
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import splu

from utils.models import SolverStatus
from utils.schemas import SolverOptions

logger = logging.getLogger(__name__)

S_MAX = 100.0
KAPPA_SIGMA = 1e10
PENALTY_MARGIN = 1.1
PENALTY_RHO = 0.1
TRACE_COLUMNS = [
    "iter", "objective", "infeasibility", "step_norm", "mu", "alpha_primal", "alpha_dual",
    "merit_before", "merit", "kkt", "penalty", "regularization", "ls_trials", "soc",
]


@dataclass
class Multipliers:
    eq: np.ndarray
    ineq: np.ndarray
    bound_lower: np.ndarray
    bound_upper: np.ndarray

    @classmethod
    def zeros(cls, n: int, m_eq: int, m_ineq: int) -> "Multipliers":
        return cls(np.zeros(m_eq), np.zeros(m_ineq), np.zeros(n), np.zeros(n))

    def scaled(self, factor: float) -> "Multipliers":
        return Multipliers(factor * self.eq, factor * self.ineq,
                           factor * self.bound_lower, factor * self.bound_upper)


@dataclass
class Solution:
    z: np.ndarray
    multipliers: Multipliers
    status: SolverStatus
    iterations: int
    wall_time: float
    kkt: float
    constraint_violation: float
    objective: float
    trace: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=TRACE_COLUMNS))

    @property
    def success(self) -> bool:
        return self.status is SolverStatus.OPTIMAL

    def is_acceptable(self, constraint_tol: float) -> bool:
        """Optimal, or at least feasible within ``constraint_tol``."""
        return self.success or self.constraint_violation <= constraint_tol

    def write_trace(self, path: Union[str, Path]) -> None:
        self.trace.to_csv(path, index=False)


# --- problem adapter ---------------------------------------------------------------------

def _as_sparse(matrix, shape: Tuple[int, int]) -> sparse.csr_matrix:
    if sparse.issparse(matrix):
        out = matrix.tocsr()
    else:
        out = sparse.csr_matrix(np.asarray(matrix, dtype=float).reshape(shape))
    if out.shape != shape:
        raise ValueError(f"jacobian has shape {out.shape}, expected {shape}")
    return out


def _clip_blocks(blocks: np.ndarray) -> np.ndarray:
    """Project each symmetric block onto the PSD cone; PSD blocks are returned untouched."""
    blocks = 0.5 * (blocks + np.swapaxes(blocks, -1, -2))
    w, V = np.linalg.eigh(blocks)
    negative = np.any(w < 0.0, axis=-1)
    if not np.any(negative):
        return blocks
    clipped = np.einsum("kij,kj,klj->kil", V, np.maximum(w, 0.0), V)
    return np.where(negative[:, None, None], clipped, blocks)


class ScaledProblem:
    """View of a protocol problem in the solver's scaled variables."""

    def __init__(self, problem):
        self.problem = problem
        self.n = int(problem.n)
        self.m_eq = int(problem.m_eq)
        self.m_ineq = int(problem.m_ineq)
        scale = getattr(problem, "variable_scale", None)
        self.S = np.ones(self.n) if scale is None else np.broadcast_to(
            np.asarray(scale, dtype=float), (self.n,)).copy()
        if np.any(self.S <= 0):
            raise ValueError("variable_scale must be positive")
        self.sigma = float(getattr(problem, "objective_scale", 1.0))
        self.lb = np.asarray(problem.lb, dtype=float) / self.S
        self.ub = np.asarray(problem.ub, dtype=float) / self.S
        self.has_lower = np.isfinite(self.lb)
        self.has_upper = np.isfinite(self.ub)
        self._S_diag = sparse.diags(self.S)

    @property
    def has_hessian(self) -> bool:
        return hasattr(self.problem, "hessian_blocks") or hasattr(self.problem, "lagrangian_hessian")

    def to_original(self, y: np.ndarray) -> np.ndarray:
        return y * self.S

    def to_scaled(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) / self.S

    def objective(self, y) -> float:
        return self.sigma * float(self.problem.objective(self.to_original(y)))

    def gradient(self, y) -> np.ndarray:
        return self.sigma * self.S * np.asarray(self.problem.gradient(self.to_original(y)), dtype=float)

    def eq(self, y) -> np.ndarray:
        if self.m_eq == 0:
            return np.zeros(0)
        return np.asarray(self.problem.eq_constraints(self.to_original(y)), dtype=float)

    def ineq(self, y) -> np.ndarray:
        if self.m_ineq == 0:
            return np.zeros(0)
        return np.asarray(self.problem.ineq_constraints(self.to_original(y)), dtype=float)

    def eq_jacobian(self, y) -> sparse.csr_matrix:
        if self.m_eq == 0:
            return sparse.csr_matrix((0, self.n))
        J = _as_sparse(self.problem.eq_jacobian(self.to_original(y)), (self.m_eq, self.n))
        return (J @ self._S_diag).tocsr()

    def ineq_jacobian(self, y) -> sparse.csr_matrix:
        if self.m_ineq == 0:
            return sparse.csr_matrix((0, self.n))
        J = _as_sparse(self.problem.ineq_jacobian(self.to_original(y)), (self.m_ineq, self.n))
        return (J @ self._S_diag).tocsr()

    def hessian(self, y, lam_eq, lam_ineq) -> sparse.csr_matrix:
        """Convexified Hessian of the scaled Lagrangian."""
        z = self.to_original(y)
        if hasattr(self.problem, "hessian_blocks"):
            hb = self.problem.hessian_blocks(z, self.sigma, lam_eq, lam_ineq)
            Sb = self.S[hb.block_index]
            blocks = _clip_blocks(Sb[:, :, None] * hb.block_values * Sb[:, None, :])
            diag = np.maximum(self.S[hb.diag_index] ** 2 * hb.diag_values, 0.0)
            return replace(hb, block_values=blocks, diag_values=diag).to_sparse(self.n)
        W = self.problem.lagrangian_hessian(z, self.sigma, lam_eq, lam_ineq)
        W = W.toarray() if sparse.issparse(W) else np.asarray(W, dtype=float)
        W = self.S[:, None] * W * self.S[None, :]
        return sparse.csr_matrix(_clip_blocks(W[None, :, :])[0])


# --- optimality measures -----------------------------------------------------------------

def constraint_violation(problem, z) -> float:
    """Largest violation over equalities, inequalities and variable bounds."""
    z = np.asarray(z, dtype=float)
    parts = [0.0]
    if problem.m_eq:
        parts.append(float(np.max(np.abs(problem.eq_constraints(z)))))
    if problem.m_ineq:
        parts.append(float(np.max(-np.asarray(problem.ineq_constraints(z)), initial=0.0)))
    lb, ub = np.asarray(problem.lb, dtype=float), np.asarray(problem.ub, dtype=float)
    parts.append(float(np.max(np.where(np.isfinite(lb), lb - z, 0.0), initial=0.0)))
    parts.append(float(np.max(np.where(np.isfinite(ub), z - ub, 0.0), initial=0.0)))
    return max(parts)


def _dual_scalings(sp: ScaledProblem, lam_eq, lam_ineq, z_L, z_U) -> Tuple[float, float]:
    n_bounds = int(sp.has_lower.sum() + sp.has_upper.sum())
    bound_sum = float(np.sum(np.abs(z_L[sp.has_lower])) + np.sum(np.abs(z_U[sp.has_upper])))
    total = bound_sum + float(np.sum(np.abs(lam_eq)) + np.sum(np.abs(lam_ineq)))
    count = sp.m_eq + sp.m_ineq + n_bounds
    s_d = max(S_MAX, total / count) / S_MAX if count else 1.0
    comp_count = sp.m_ineq + n_bounds
    comp_total = bound_sum + float(np.sum(np.abs(lam_ineq)))
    s_c = max(S_MAX, comp_total / comp_count) / S_MAX if comp_count else 1.0
    return s_d, s_c


def _measures(sp: ScaledProblem, y, g, J_eq, J_in, c_in, mult: Multipliers) -> Dict[str, float]:
    stat = g - J_eq.T @ mult.eq - J_in.T @ mult.ineq - mult.bound_lower + mult.bound_upper
    comp = [np.abs(c_in * mult.ineq),
            np.abs((y - sp.lb) * mult.bound_lower)[sp.has_lower],
            np.abs((sp.ub - y) * mult.bound_upper)[sp.has_upper]]
    signs = [mult.ineq, mult.bound_lower[sp.has_lower], mult.bound_upper[sp.has_upper]]
    s_d, s_c = _dual_scalings(sp, mult.eq, mult.ineq, mult.bound_lower, mult.bound_upper)
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "complementarity": float(max(np.max(c, initial=0.0) for c in comp)),
        "dual_sign": float(max(np.max(-s, initial=0.0) for s in signs)),
        "s_d": s_d,
        "s_c": s_c,
    }


def kkt_components(problem, z, multipliers: Multipliers) -> Dict[str, float]:
    """Unnormalized KKT terms at original-space ``z`` with scaled-space multipliers."""
    sp = ScaledProblem(problem)
    y = sp.to_scaled(z)
    out = _measures(sp, y, sp.gradient(y), sp.eq_jacobian(y), sp.ineq_jacobian(y), sp.ineq(y), multipliers)
    out["primal"] = constraint_violation(problem, z)
    return out


def _residual(m: Dict[str, float]) -> float:
    return max(m["stationarity"] / m["s_d"], m["primal"], m["complementarity"] / m["s_c"], m["dual_sign"])


def kkt_residual(problem, z, multipliers: Multipliers) -> float:
    """Max of scaled stationarity, primal infeasibility and complementarity."""
    return _residual(kkt_components(problem, z, multipliers))


def _fraction_to_boundary(values: np.ndarray, steps: np.ndarray, tau: float) -> float:
    """Largest alpha in (0, 1] keeping values + alpha*steps >= (1 - tau)*values."""
    shrinking = steps < 0
    if not np.any(shrinking):
        return 1.0
    return float(min(1.0, np.min(-tau * values[shrinking] / steps[shrinking])))


# --- solver ------------------------------------------------------------------------------

@dataclass
class _Iterate:
    y: np.ndarray
    s: np.ndarray
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    z_L: np.ndarray
    z_U: np.ndarray
    v: np.ndarray

    def copy(self) -> "_Iterate":
        return _Iterate(*(a.copy() for a in (self.y, self.s, self.lam_eq, self.lam_ineq,
                                              self.z_L, self.z_U, self.v)))

    def multipliers(self) -> Multipliers:
        return Multipliers(self.lam_eq.copy(), self.lam_ineq.copy(), self.z_L.copy(), self.z_U.copy())


@dataclass
class _Point:
    f: float
    g: np.ndarray
    c_eq: np.ndarray
    c_in: np.ndarray
    J_eq: sparse.csr_matrix
    J_in: sparse.csr_matrix


@dataclass
class _Direction:
    dy: np.ndarray
    ds: np.ndarray
    dlam_eq: np.ndarray
    dlam_ineq: np.ndarray
    dz_L: np.ndarray
    dz_U: np.ndarray
    dv: np.ndarray
    lu: object
    quad: float
    sig_s: np.ndarray


class InteriorPointSolver:
    """Barrier method with a filter-free l1-merit backtracking line search.

    Each iteration solves the primal-dual Newton system reduced to
    [[H, J_E^T], [J_E, -delta_c I]], with the inequality slacks and all bound
    multipliers eliminated, using a sparse LU factorization. H holds the
    convexified Lagrangian Hessian so no inertia correction is needed.
    """

    def __init__(self, problem, opts: Optional[SolverOptions] = None):
        self.problem = problem
        self.opts = opts or SolverOptions()
        self.sp = ScaledProblem(problem)
        mode = self.opts.hessian
        if mode == "auto":
            mode = "exact" if self.sp.has_hessian else "bfgs"
        if mode == "exact" and not self.sp.has_hessian:
            raise ValueError("exact Hessian requested but the problem supplies none")
        self.hessian_mode = mode
        relax = self.opts.bound_relax
        self.lo = np.where(self.sp.has_lower, self.sp.lb - relax * np.maximum(1.0, np.abs(self.sp.lb)), -np.inf)
        self.hi = np.where(self.sp.has_upper, self.sp.ub + relax * np.maximum(1.0, np.abs(self.sp.ub)), np.inf)
        self.mu_min = min(self.opts.kkt_tol, self.opts.constraint_tol) / 10.0
        self._B: Optional[np.ndarray] = None

    # --- evaluation helpers ----------------------------------------------------------

    def _evaluate(self, y) -> _Point:
        sp = self.sp
        return _Point(sp.objective(y), sp.gradient(y), sp.eq(y), sp.ineq(y),
                      sp.eq_jacobian(y), sp.ineq_jacobian(y))

    def _gaps(self, y) -> Tuple[np.ndarray, np.ndarray]:
        dL = np.where(self.sp.has_lower, y - self.lo, 1.0)
        dU = np.where(self.sp.has_upper, self.hi - y, 1.0)
        return dL, dU

    def _push_interior(self, y: np.ndarray) -> np.ndarray:
        k = self.opts.bound_push
        lo, hi = self.lo, self.hi
        both = self.sp.has_lower & self.sp.has_upper
        width = np.where(both, hi - lo, np.inf)
        p_L = np.where(self.sp.has_lower, np.minimum(k * np.maximum(1.0, np.abs(lo)), k * width), 0.0)
        p_U = np.where(self.sp.has_upper, np.minimum(k * np.maximum(1.0, np.abs(hi)), k * width), 0.0)
        y = np.where(self.sp.has_lower, np.maximum(y, lo + p_L), y)
        y = np.where(self.sp.has_upper, np.minimum(y, hi - p_U), y)
        return y

    def _barrier_error(self, pt: _Point, it: _Iterate, mu: float) -> float:
        sp = self.sp
        stat = pt.g - pt.J_eq.T @ it.lam_eq - pt.J_in.T @ it.lam_ineq - it.z_L + it.z_U
        stat_s = it.lam_ineq - it.v
        dL, dU = self._gaps(it.y)
        s_d, s_c = _dual_scalings(sp, it.lam_eq, it.lam_ineq, it.z_L, it.z_U)
        dual = max(np.max(np.abs(stat), initial=0.0), np.max(np.abs(stat_s), initial=0.0))
        primal = max(np.max(np.abs(pt.c_eq), initial=0.0), np.max(np.abs(pt.c_in - it.s), initial=0.0))
        comp = max(
            np.max(np.abs(dL * it.z_L - mu)[sp.has_lower], initial=0.0),
            np.max(np.abs(dU * it.z_U - mu)[sp.has_upper], initial=0.0),
            np.max(np.abs(it.s * it.v - mu), initial=0.0),
        )
        return float(max(dual / s_d, primal, comp / s_c))

    def _public_residual(self, pt: _Point, it: _Iterate, violation: float) -> float:
        m = _measures(self.sp, it.y, pt.g, pt.J_eq, pt.J_in, pt.c_in, it.multipliers())
        m["primal"] = violation
        return _residual(m)

    def _violation(self, y) -> float:
        return constraint_violation(self.problem, self.sp.to_original(y))

    def _merit(self, y, s, f, c_eq, c_in, mu, nu) -> float:
        dL, dU = self._gaps(y)
        if np.any(dL[self.sp.has_lower] <= 0) or np.any(dU[self.sp.has_upper] <= 0) or np.any(s <= 0):
            return np.inf
        barrier = f - mu * (np.sum(np.log(dL[self.sp.has_lower])) + np.sum(np.log(dU[self.sp.has_upper]))
                            + np.sum(np.log(s)))
        value = barrier + nu * (np.sum(np.abs(c_eq)) + np.sum(np.abs(c_in - s)))
        return float(value) if np.isfinite(value) else np.inf

    # --- Newton step -----------------------------------------------------------------

    def _hessian(self, pt: _Point, it: _Iterate) -> sparse.csr_matrix:
        if self.hessian_mode == "exact":
            return self.sp.hessian(it.y, it.lam_eq, it.lam_ineq)
        if self._B is None:
            self._B = np.eye(self.sp.n)
        return sparse.csr_matrix(self._B)

    def _factor(self, W, pt: _Point, sig_x, sig_s, delta_w: float, delta_c: float):
        n = self.sp.n
        Hw = (W + sparse.diags(sig_x + delta_w)).tocsr()
        H = Hw + pt.J_in.T @ sparse.diags(sig_s) @ pt.J_in
        if self.sp.m_eq:
            K = sparse.bmat([[H, pt.J_eq.T], [pt.J_eq, -delta_c * sparse.identity(self.sp.m_eq)]], format="csc")
        else:
            K = sparse.csc_matrix(H)
        return splu(K), Hw

    def _direction(self, pt: _Point, it: _Iterate, mu: float, W, delta_w: float) -> Optional[_Direction]:
        sp, o, n = self.sp, self.opts, self.sp.n
        dL, dU = self._gaps(it.y)
        sig_L = np.where(sp.has_lower, it.z_L / dL, 0.0)
        sig_U = np.where(sp.has_upper, it.z_U / dU, 0.0)
        bar_L = np.where(sp.has_lower, mu / dL, 0.0)
        bar_U = np.where(sp.has_upper, mu / dU, 0.0)
        sig_s = it.v / it.s
        r_x = pt.g - pt.J_eq.T @ it.lam_eq - pt.J_in.T @ it.lam_ineq - bar_L + bar_U
        r_s = it.lam_ineq - mu / it.s
        e_in = pt.c_in - it.s

        delta_c = o.constraint_reg
        for _ in range(3):
            try:
                lu, Hw = self._factor(W, pt, sig_L + sig_U, sig_s, delta_w, delta_c)
                break
            except RuntimeError:
                delta_w = max(10.0 * delta_w, 1e-4)
                delta_c = max(delta_c, 1e-8)
        else:
            return None

        rhs = np.concatenate([-r_x - pt.J_in.T @ (r_s + sig_s * e_in), -pt.c_eq])
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            return None
        dy = sol[:n]
        dlam_eq = -sol[n:]
        ds = pt.J_in @ dy + e_in
        dlam_ineq = -r_s - sig_s * ds
        dz_L = np.where(sp.has_lower, bar_L - it.z_L - sig_L * dy, 0.0)
        dz_U = np.where(sp.has_upper, bar_U - it.z_U + sig_U * dy, 0.0)
        dv = mu / it.s - it.v - sig_s * ds
        quad = float(dy @ (Hw @ dy) + ds @ (sig_s * ds))
        return _Direction(dy, ds, dlam_eq, dlam_ineq, dz_L, dz_U, dv, lu, quad, sig_s)

    def _second_order_correction(self, pt: _Point, d: _Direction, c_eq_t, c_in_t, s_t) -> Tuple[np.ndarray, np.ndarray]:
        e_in = c_in_t - s_t
        rhs = np.concatenate([-pt.J_in.T @ (d.sig_s * e_in), -c_eq_t])
        sol = d.lu.solve(rhs)
        dy_c = sol[: self.sp.n]
        return dy_c, pt.J_in @ dy_c + e_in

    # --- main loop -------------------------------------------------------------------

    def solve(self, z0) -> Solution:
        o, sp = self.opts, self.sp
        t_start = time.perf_counter()
        x0 = np.asarray(z0, dtype=float)
        if x0.shape != (sp.n,):
            raise ValueError(f"initial point has shape {x0.shape}, expected ({sp.n},)")

        y = self._push_interior(sp.to_scaled(x0))
        c_in0 = sp.ineq(y)
        it = _Iterate(
            y=y,
            s=np.maximum(c_in0, o.bound_push),
            lam_eq=np.zeros(sp.m_eq),
            lam_ineq=np.ones(sp.m_ineq),
            z_L=np.where(sp.has_lower, 1.0, 0.0),
            z_U=np.where(sp.has_upper, 1.0, 0.0),
            v=np.ones(sp.m_ineq),
        )
        mu = o.mu_init
        tau = max(o.tau_min, 1.0 - mu)
        nu = 1.0
        delta_w = 0.0
        rows: List[Dict[str, float]] = []
        best: Optional[Tuple[tuple, _Iterate, float, float, float]] = None
        status = SolverStatus.MAX_ITER
        prev: Optional[Tuple[np.ndarray, _Point]] = None
        k = 0

        while True:
            pt = self._evaluate(it.y)
            if self.hessian_mode == "bfgs" and prev is not None:
                self._bfgs_update(prev, pt, it)
            violation = self._violation(it.y)
            E0 = self._barrier_error(pt, it, 0.0)
            public = self._public_residual(pt, it, violation)
            f_orig = pt.f / sp.sigma
            key = (0, f_orig) if violation <= o.constraint_tol else (1, violation)
            if best is None or key < best[0]:
                best = (key, it.copy(), f_orig, violation, public)

            if E0 <= o.kkt_tol and public <= o.kkt_tol and violation <= o.constraint_tol:
                status = SolverStatus.OPTIMAL
                best = (key, it, f_orig, violation, public)
                break
            if k >= o.max_iter:
                status = SolverStatus.MAX_ITER
                break
            if o.time_budget is not None and time.perf_counter() - t_start > o.time_budget:
                status = SolverStatus.TIME_BUDGET
                break

            while mu > self.mu_min and self._barrier_error(pt, it, mu) <= o.kappa_eps * mu:
                mu = max(self.mu_min, min(o.kappa_mu * mu, mu ** o.theta_mu))
                tau = max(o.tau_min, 1.0 - mu)

            W = self._hessian(pt, it)
            accepted = None
            delta_w = max(o.reg_floor, delta_w / 3.0) if delta_w else o.reg_floor
            while accepted is None:
                d = self._direction(pt, it, mu, W, delta_w)
                if d is not None:
                    accepted, nu = self._line_search(pt, it, d, mu, nu, tau)
                if accepted is not None or delta_w >= o.reg_max:
                    break
                delta_w = max(1e-4, 10.0 * delta_w)
                logger.debug("iteration %d: line search failed, regularization raised to %.1e", k, delta_w)

            if accepted is None:
                status = SolverStatus.INFEASIBLE if violation > o.constraint_tol else SolverStatus.MAX_ITER
                logger.debug("solver stalled at iteration %d with violation %.2e", k, violation)
                break

            new_it, info = accepted
            prev = (it.y.copy(), pt) if self.hessian_mode == "bfgs" else None
            it = new_it
            k += 1
            info.update({
                "iter": k, "objective": sp.objective(it.y) / sp.sigma,
                "infeasibility": self._violation(it.y), "mu": mu, "kkt": E0,
                "penalty": nu, "regularization": delta_w,
            })
            rows.append(info)
            logger.debug("iter %3d f=%.6e inf=%.2e kkt=%.2e mu=%.1e alpha=%.3f", k, info["objective"],
                         info["infeasibility"], E0, mu, info["alpha_primal"])

        _, final, f_final, viol_final, kkt_final = best
        wall = time.perf_counter() - t_start
        trace = pd.DataFrame(rows, columns=TRACE_COLUMNS) if o.record_trace else pd.DataFrame(columns=TRACE_COLUMNS)
        logger.debug("solve finished: %s after %d iterations in %.3f s", status.value, k, wall)
        return Solution(
            z=sp.to_original(final.y),
            multipliers=final.multipliers(),
            status=status,
            iterations=k,
            wall_time=wall,
            kkt=kkt_final,
            constraint_violation=viol_final,
            objective=f_final,
            trace=trace,
        )

    def _line_search(self, pt: _Point, it: _Iterate, d: _Direction, mu: float, nu: float, tau: float):
        o, sp = self.opts, self.sp
        dL, dU = self._gaps(it.y)
        alpha_max = min(
            _fraction_to_boundary(dL[sp.has_lower], d.dy[sp.has_lower], tau),
            _fraction_to_boundary(dU[sp.has_upper], -d.dy[sp.has_upper], tau),
            _fraction_to_boundary(it.s, d.ds, tau),
        )
        alpha_dual = min(
            _fraction_to_boundary(it.z_L[sp.has_lower], d.dz_L[sp.has_lower], tau),
            _fraction_to_boundary(it.z_U[sp.has_upper], d.dz_U[sp.has_upper], tau),
            _fraction_to_boundary(it.v, d.dv, tau),
        )

        bar_L = np.where(sp.has_lower, mu / dL, 0.0)
        bar_U = np.where(sp.has_upper, mu / dU, 0.0)
        grad_dir = float((pt.g - bar_L + bar_U) @ d.dy - (mu / it.s) @ d.ds)
        viol1 = float(np.sum(np.abs(pt.c_eq)) + np.sum(np.abs(pt.c_in - it.s)))
        lin1 = float(np.sum(np.abs(pt.c_eq + pt.J_eq @ d.dy))
                     + np.sum(np.abs(pt.c_in - it.s + pt.J_in @ d.dy - d.ds)))
        lam_next = np.concatenate([it.lam_eq + d.dlam_eq, it.lam_ineq + d.dlam_ineq])
        nu_req = PENALTY_MARGIN * float(np.max(np.abs(lam_next), initial=0.0))
        if viol1 - lin1 > 0:
            nu_req = max(nu_req, (grad_dir + 0.5 * max(d.quad, 0.0)) / ((1.0 - PENALTY_RHO) * (viol1 - lin1)))
        nu = max(nu, nu_req)
        slope = min(grad_dir + nu * (lin1 - viol1), 0.0)

        phi0 = self._merit(it.y, it.s, pt.f, pt.c_eq, pt.c_in, mu, nu)
        slack = 10.0 * np.finfo(float).eps * abs(phi0)
        alpha = alpha_max
        trials = 0
        used_soc = False
        while alpha >= o.min_step:
            y_t = it.y + alpha * d.dy
            s_t = it.s + alpha * d.ds
            f_t, ce_t, ci_t = sp.objective(y_t), sp.eq(y_t), sp.ineq(y_t)
            phi_t = self._merit(y_t, s_t, f_t, ce_t, ci_t, mu, nu)
            trials += 1
            if phi_t <= phi0 + o.armijo_eta * alpha * slope + slack:
                break
            if trials == 1 and np.isfinite(phi_t):
                theta_t = float(np.sum(np.abs(ce_t)) + np.sum(np.abs(ci_t - s_t)))
                if theta_t >= viol1:
                    dy_c, ds_c = self._second_order_correction(pt, d, ce_t, ci_t, s_t)
                    dy_bar, ds_bar = alpha * d.dy + dy_c, alpha * d.ds + ds_c
                    alpha_soc = min(
                        _fraction_to_boundary(dL[sp.has_lower], dy_bar[sp.has_lower], tau),
                        _fraction_to_boundary(dU[sp.has_upper], -dy_bar[sp.has_upper], tau),
                        _fraction_to_boundary(it.s, ds_bar, tau),
                    )
                    y_c = it.y + alpha_soc * dy_bar
                    s_c = it.s + alpha_soc * ds_bar
                    f_c, ce_c, ci_c = sp.objective(y_c), sp.eq(y_c), sp.ineq(y_c)
                    phi_c = self._merit(y_c, s_c, f_c, ce_c, ci_c, mu, nu)
                    if phi_c <= phi0 + o.armijo_eta * alpha * slope + slack:
                        y_t, s_t, phi_t, used_soc = y_c, s_c, phi_c, True
                        break
            alpha *= o.backtrack_factor
        else:
            return None, nu

        new = _Iterate(
            y=y_t,
            s=s_t,
            lam_eq=it.lam_eq + alpha * d.dlam_eq,
            lam_ineq=it.lam_ineq + alpha * d.dlam_ineq,
            z_L=it.z_L + alpha_dual * d.dz_L,
            z_U=it.z_U + alpha_dual * d.dz_U,
            v=it.v + alpha_dual * d.dv,
        )
        dL_new, dU_new = self._gaps(new.y)
        new.z_L = np.where(sp.has_lower, np.clip(new.z_L, mu / (KAPPA_SIGMA * dL_new), KAPPA_SIGMA * mu / dL_new), 0.0)
        new.z_U = np.where(sp.has_upper, np.clip(new.z_U, mu / (KAPPA_SIGMA * dU_new), KAPPA_SIGMA * mu / dU_new), 0.0)
        new.v = np.clip(new.v, mu / (KAPPA_SIGMA * new.s), KAPPA_SIGMA * mu / new.s)
        info = {
            "step_norm": float(np.max(np.abs(sp.to_original(new.y - it.y)), initial=0.0)),
            "alpha_primal": alpha,
            "alpha_dual": alpha_dual,
            "merit_before": phi0,
            "merit": phi_t,
            "ls_trials": trials,
            "soc": used_soc,
        }
        return (new, info), nu

    def _bfgs_update(self, prev, pt: _Point, it: _Iterate) -> None:
        """Damped (Powell) BFGS update of the scaled Lagrangian Hessian."""
        y_old, pt_old = prev
        step = it.y - y_old
        if np.max(np.abs(step), initial=0.0) < 1e-14:
            return

        def grad_lag(p: _Point):
            return p.g - p.J_eq.T @ it.lam_eq - p.J_in.T @ it.lam_ineq

        change = grad_lag(pt) - grad_lag(pt_old)
        B = self._B
        Bs = B @ step
        sBs = float(step @ Bs)
        if sBs <= 0:
            return
        sy = float(step @ change)
        theta = 1.0 if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
        r = theta * change + (1.0 - theta) * Bs
        self._B = B + np.outer(r, r) / float(step @ r) - np.outer(Bs, Bs) / sBs


def solve(problem, z0, opts: Optional[SolverOptions] = None) -> Solution:
    """Solve ``problem`` from ``z0``; failures are reported through ``Solution.status``."""
    return InteriorPointSolver(problem, opts).solve(z0)
