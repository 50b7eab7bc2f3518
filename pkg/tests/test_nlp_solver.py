import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from utils.models import SolverStatus, VehicleState
from utils.nlp_solver import Multipliers, kkt_components, kkt_residual, solve
from utils.ocp import build_ocp, warm_start
from utils.schemas import OcpConfig, SolverOptions
from utils.traffic import PrecedingPrediction

TIGHT = SolverOptions(kkt_tol=1e-9, constraint_tol=1e-9, max_iter=500)


class SquareAboveOne:
    """min x^2 subject to x >= 1, as a bound or as an inequality row."""

    def __init__(self, as_bound=True):
        self.n = 1
        self.m_eq = 0
        self.m_ineq = 0 if as_bound else 1
        self.lb = np.array([1.0 if as_bound else -np.inf])
        self.ub = np.array([np.inf])

    def objective(self, z):
        return float(z[0] ** 2)

    def gradient(self, z):
        return np.array([2.0 * z[0]])

    def eq_constraints(self, z):
        return np.zeros(0)

    def eq_jacobian(self, z):
        return np.zeros((0, 1))

    def ineq_constraints(self, z):
        return np.array([z[0] - 1.0])[: self.m_ineq]

    def ineq_jacobian(self, z):
        return np.ones((self.m_ineq, 1))


class WithHessian(SquareAboveOne):
    def lagrangian_hessian(self, z, obj_factor, lam_eq, lam_ineq):
        return np.array([[2.0 * obj_factor]])


class RosenbrockOnDisk:
    """Rosenbrock restricted to the unit disk; the minimizer sits on the circle."""

    n, m_eq, m_ineq = 2, 0, 1
    lb = np.full(2, -np.inf)
    ub = np.full(2, np.inf)

    @staticmethod
    def f(x, y):
        return (1.0 - x) ** 2 + 100.0 * (y - x * x) ** 2

    def objective(self, z):
        return float(self.f(*z))

    def gradient(self, z):
        x, y = z
        return np.array([-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)])

    def eq_constraints(self, z):
        return np.zeros(0)

    def eq_jacobian(self, z):
        return np.zeros((0, 2))

    def ineq_constraints(self, z):
        return np.array([1.0 - z[0] ** 2 - z[1] ** 2])

    def ineq_jacobian(self, z):
        return np.array([[-2.0 * z[0], -2.0 * z[1]]])

    def lagrangian_hessian(self, z, obj_factor, lam_eq, lam_ineq):
        x, y = z
        H = obj_factor * np.array([[2.0 - 400.0 * y + 1200.0 * x * x, -400.0 * x], [-400.0 * x, 200.0]])
        return H + 2.0 * lam_ineq[0] * np.eye(2)


class Contradiction(SquareAboveOne):
    """x >= 1 and x <= 0."""

    def __init__(self):
        super().__init__(as_bound=False)
        self.m_ineq = 2

    def ineq_constraints(self, z):
        return np.array([z[0] - 1.0, -z[0]])

    def ineq_jacobian(self, z):
        return np.array([[1.0], [-1.0]])

    def lagrangian_hessian(self, z, obj_factor, lam_eq, lam_ineq):
        return np.array([[2.0 * obj_factor]])


@pytest.fixture(scope="module")
def rosenbrock_reference():
    res = minimize_scalar(lambda th: RosenbrockOnDisk.f(np.cos(th), np.sin(th)), bounds=(0.0, np.pi / 2),
                          method="bounded", options={"xatol": 1e-12})
    return np.array([np.cos(res.x), np.sin(res.x)])


@pytest.mark.parametrize("problem", [WithHessian(as_bound=True), WithHessian(as_bound=False)],
                         ids=["bound", "inequality"])
def test_active_lower_limit(problem):
    sol = solve(problem, np.array([3.0]))
    assert sol.status is SolverStatus.OPTIMAL
    assert sol.z[0] == pytest.approx(1.0, abs=1e-6)
    assert sol.objective == pytest.approx(1.0, abs=1e-5)


def test_quasi_newton_without_hessian():
    sol = solve(SquareAboveOne(as_bound=False), np.array([3.0]), SolverOptions(hessian="bfgs"))
    assert sol.success
    assert sol.z[0] == pytest.approx(1.0, abs=1e-6)


def test_exact_hessian_must_be_supplied():
    with pytest.raises(ValueError):
        solve(SquareAboveOne(), np.array([3.0]), SolverOptions(hessian="exact"))


def test_initial_point_shape():
    with pytest.raises(ValueError):
        solve(WithHessian(), np.zeros(3))


def test_rosenbrock_on_the_disk(rosenbrock_reference):
    sol = solve(RosenbrockOnDisk(), np.zeros(2), TIGHT)
    assert sol.success
    np.testing.assert_allclose(sol.z, rosenbrock_reference, atol=1e-6)
    assert sol.kkt == pytest.approx(kkt_residual(RosenbrockOnDisk(), sol.z, sol.multipliers), abs=1e-12)


def test_merit_never_increases():
    opts = TIGHT.model_copy(update={"record_trace": True})
    sol = solve(RosenbrockOnDisk(), np.zeros(2), opts)
    trace = sol.trace
    assert len(trace) == sol.iterations
    assert np.all(trace["merit"] <= trace["merit_before"] + 1e-10 * trace["merit_before"].abs())


def test_trace_is_empty_unless_requested():
    assert solve(RosenbrockOnDisk(), np.zeros(2)).trace.empty


def test_same_input_same_answer():
    a = solve(RosenbrockOnDisk(), np.zeros(2))
    b = solve(RosenbrockOnDisk(), np.zeros(2))
    np.testing.assert_array_equal(a.z, b.z)
    assert a.iterations == b.iterations


def test_iteration_limit():
    sol = solve(RosenbrockOnDisk(), np.zeros(2), SolverOptions(max_iter=1))
    assert sol.status is SolverStatus.MAX_ITER
    assert sol.iterations == 1


def test_time_budget():
    sol = solve(RosenbrockOnDisk(), np.zeros(2), SolverOptions(time_budget=1e-9))
    assert sol.status is SolverStatus.TIME_BUDGET


def test_contradictory_constraints_are_reported():
    sol = solve(Contradiction(), np.array([0.5]), SolverOptions(max_iter=50))
    assert not sol.success
    assert sol.constraint_violation > 0.1


class TestOnTheOcp:
    @pytest.fixture
    def problem(self, system):
        N = 20
        pred = PrecedingPrediction(d=40.0 + np.arange(N + 1) * 1.0, v=np.full(N + 1, 10.0),
                                   a=np.zeros(N + 1), dt=0.1)
        return build_ocp(VehicleState(0.0, 10.0, 0.8), pred, [], 0.0, system.vehicle, system.battery,
                         system.powertrain, OcpConfig(N=N))

    def test_cold_start_is_not_optimal(self, problem):
        z0 = warm_start(problem).z
        assert kkt_residual(problem, z0, Multipliers.zeros(problem.n, problem.m_eq, problem.m_ineq)) > 1e-6

    def test_solution_is_a_kkt_point(self, problem):
        sol = solve(problem, warm_start(problem).z)
        assert sol.is_acceptable(1e-6)
        parts = kkt_components(problem, sol.z, sol.multipliers)
        assert parts["primal"] <= 1e-6
        if sol.success:
            assert parts["stationarity"] / parts["s_d"] <= 1e-6
            assert parts["complementarity"] / parts["s_c"] <= 1e-6
        violations = problem.violation_by_family(sol.z)
        assert max(violations.values()) <= 1e-6
