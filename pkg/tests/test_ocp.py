import numpy as np
import pytest

from utils.models import SignalMode, VehicleState
from utils.nlp_solver import solve
from utils.ocp import INEQ_FAMILIES, OcpBuildError, build_ocp, evaluate, plan_signal_constraints, warm_start
from utils.schemas import OcpConfig, VehicleParams
from utils.traffic import Intersection, PrecedingPrediction
from utils.vehicle_model import torque_from_acceleration


def _leader(N, gap=40.0, v=10.0, dt=0.1):
    return PrecedingPrediction(d=gap + v * dt * np.arange(N + 1), v=np.full(N + 1, v), a=np.zeros(N + 1), dt=dt)


def _problem(system, N=20, x0=VehicleState(0.0, 10.0, 0.8), pred=None, signals=(), vehicle=None, **cfg):
    return build_ocp(x0, pred or _leader(N), list(signals), 0.0, vehicle or system.vehicle, system.battery,
                     system.powertrain, OcpConfig(N=N, **cfg))


def _fd(f, z, steps):
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = steps[j]
        cols.append((np.asarray(f(z + e)) - np.asarray(f(z - e))) / (2.0 * steps[j]))
    return np.array(cols).T


@pytest.fixture(scope="module")
def random_points(system):
    """100 points scattered around the cold start, kept inside the variable bounds."""
    problem = _problem(system)
    rng = np.random.default_rng(17)
    center = warm_start(problem).z
    lo = problem.lb + 0.01 * problem.variable_scale
    hi = problem.ub - 0.01 * problem.variable_scale
    points = [np.clip(center + 0.05 * problem.variable_scale * rng.normal(size=problem.n), lo, hi)
              for _ in range(100)]
    return problem, points


class TestStructure:
    def test_dimension_for_default_horizon(self, system):
        problem = _problem(system, N=150)
        assert problem.n == 1353
        assert problem.m_eq == 3 + 4 * 150
        assert problem.m_ineq == len(INEQ_FAMILIES) * 150

    def test_registry_partitions_the_rows(self, system):
        problem = _problem(system)
        eq = np.concatenate([f.index for f in problem.registry if f.kind == "eq"])
        ineq = np.concatenate([f.index for f in problem.registry if f.kind == "ineq"])
        np.testing.assert_array_equal(np.sort(eq), np.arange(problem.m_eq))
        np.testing.assert_array_equal(np.sort(ineq), np.arange(problem.m_ineq))
        assert problem.family("dynamics_soc").scale == pytest.approx(problem.battery.C_bat / 0.1)
        with pytest.raises(KeyError):
            problem.family("nope")

    def test_wrong_shape(self, system):
        with pytest.raises(ValueError):
            evaluate(_problem(system), np.zeros(5))

    def test_dump(self, system, tmp_path):
        problem = _problem(system)
        problem.dump(tmp_path / "ocp.txt")
        text = (tmp_path / "ocp.txt").read_text()
        assert "n = 183" in text
        assert "family side_slip kind=ineq count=20" in text


class TestBuildErrors:
    def test_short_prediction(self, system):
        with pytest.raises(OcpBuildError):
            _problem(system, N=20, pred=_leader(10))

    def test_step_mismatch(self, system):
        with pytest.raises(OcpBuildError):
            _problem(system, N=20, pred=_leader(20, dt=0.2))

    def test_speed_out_of_range(self, system):
        with pytest.raises(OcpBuildError):
            _problem(system, x0=VehicleState(0.0, 25.0, 0.8))

    def test_soc_out_of_range(self, system):
        with pytest.raises(OcpBuildError):
            _problem(system, x0=VehicleState(0.0, 10.0, 1.5))


class TestDerivatives:
    def test_gradient(self, random_points):
        problem, points = random_points
        for z in points:
            g_fd = _fd(problem.objective, z, 1e-5 * problem.variable_scale)
            g = problem.gradient(z)
            np.testing.assert_allclose(g, g_fd, rtol=1e-5, atol=1e-6 * np.abs(g).max())

    def test_equality_jacobian(self, random_points):
        problem, points = random_points
        for z in points:
            J_fd = _fd(problem.eq_constraints, z, 1e-5 * problem.variable_scale)
            J = problem.eq_jacobian(z).toarray()
            np.testing.assert_allclose(J, J_fd, rtol=1e-5, atol=1e-7 * np.abs(J).max())

    def test_inequality_jacobian(self, random_points):
        problem, points = random_points
        for z in points:
            J_fd = _fd(problem.ineq_constraints, z, 1e-5 * problem.variable_scale)
            J = problem.ineq_jacobian(z).toarray()
            np.testing.assert_allclose(J, J_fd, rtol=1e-5, atol=1e-7 * np.abs(J).max())

    def test_points_stay_inside_the_bounds(self, random_points):
        problem, points = random_points
        assert len(points) == 100
        for z in points:
            assert np.all(z >= problem.lb) and np.all(z <= problem.ub)

    def test_lagrangian_hessian(self, random_points):
        problem, points = random_points
        rng = np.random.default_rng(4)
        for z in points[:10]:
            lam_eq = rng.normal(size=problem.m_eq)
            lam_in = rng.uniform(0.0, 1.0, problem.m_ineq)

            def grad_lagrangian(x):
                return (2.0 * problem.gradient(x) - problem.eq_jacobian(x).T @ lam_eq
                        - problem.ineq_jacobian(x).T @ lam_in)

            H_fd = _fd(grad_lagrangian, z, 1e-5 * problem.variable_scale)
            H = problem.lagrangian_hessian(z, 2.0, lam_eq, lam_in).toarray()
            np.testing.assert_allclose(H, H.T, atol=1e-12 * np.abs(H).max())
            np.testing.assert_allclose(H, H_fd, rtol=1e-4, atol=1e-5 * np.abs(H).max())


class TestCost:
    def test_soft_penalty_is_quadratic(self, system):
        problem = _problem(system)
        x = problem.layout.unpack(warm_start(problem).z)
        x["s1"] = np.ones(problem.N)
        x["s2"] = np.zeros(problem.N)
        single = problem.cost_terms(problem.layout.pack(**x))["J_f"]
        x["s1"] = 2.0 * np.ones(problem.N)
        double = problem.cost_terms(problem.layout.pack(**x))["J_f"]
        assert double == pytest.approx(4.0 * single)

    def test_power_weight_zero_ignores_battery_power(self, system):
        problem = _problem(system, w2=0.0)
        z = warm_start(problem).z
        other = z.copy()
        other[problem.layout.P_bat] += 5000.0
        assert problem.objective(other) == problem.objective(z)

    def test_terminal_terms_can_be_switched_off(self, system):
        problem = _problem(system, use_terminal_gap=False, use_terminal_speed=False)
        assert problem.cost_terms(warm_start(problem).z)["J_t"] == 0.0

    def test_slack_shrinks_as_its_weight_grows(self, system):
        # closing at 5 m/s from 8 m back: the lower gap bound cannot hold without slack
        x0 = VehicleState(0.0, 15.0, 0.8)
        pred = _leader(20, gap=8.0, v=10.0)
        penalty, worst = [], []
        for w in (1.0, 10.0, 100.0):
            problem = _problem(system, x0=x0, pred=pred, w5=w, w6=w)
            sol = solve(problem, warm_start(problem))
            assert sol.success
            x = problem.layout.unpack(sol.z)
            penalty.append(float(np.sum(x["s1"] ** 2 + x["s2"] ** 2)))
            worst.append(float(max(x["s1"].max(), x["s2"].max())))
        assert worst[0] > 0.5
        assert penalty[0] >= penalty[1] - 1e-6
        assert penalty[1] >= penalty[2] - 1e-6
        assert worst[0] >= worst[1] - 1e-4
        assert worst[1] >= worst[2] - 1e-4


class TestWarmStart:
    def test_cold_start_satisfies_the_dynamics(self, system):
        problem = _problem(system)
        z = warm_start(problem).z
        assert np.max(np.abs(problem.eq_constraints(z))) <= 1e-6

    def test_shifted_plan_keeps_the_tail(self, system):
        problem = _problem(system)
        first = warm_start(problem)
        shifted = warm_start(problem, first, shift=5)
        np.testing.assert_array_equal(shifted.T_f[:15], first.T_f[5:])
        assert shifted.d[0] == problem.x0.d


class TestSignalPlanning:
    def test_red_ahead_means_wait(self, system):
        inter = Intersection("I1", 30.0, 60.0, ((10.0, 40.0),))
        cfg = OcpConfig(N=20)
        x0 = VehicleState(0.0, 10.0, 0.8)
        signals = plan_signal_constraints(x0, 0.0, _leader(20), [inter], cfg, system.vehicle)
        assert len(signals) == 1
        wait = signals[0]
        assert wait.mode is SignalMode.WAIT
        assert wait.steps == tuple(range(1, 21))
        assert wait.bound == pytest.approx(29.0)
        problem = _problem(system, signals=signals)
        assert len(problem.family("signal").index) == 20

    def test_long_green_is_free(self, system):
        inter = Intersection("I1", 30.0, 60.0, ((10.0, 40.0),))
        signals = plan_signal_constraints(VehicleState(0.0, 10.0, 0.8), 20.0, _leader(20), [inter],
                                          OcpConfig(N=20), system.vehicle)
        assert signals[0].mode is SignalMode.FREE
        assert _problem(system, signals=signals).m_ineq == len(INEQ_FAMILIES) * 20

    def test_out_of_reach_is_ignored(self, system):
        inter = Intersection("I1", 500.0, 60.0, ((10.0, 40.0),))
        assert plan_signal_constraints(VehicleState(0.0, 10.0, 0.8), 0.0, _leader(20), [inter],
                                       OcpConfig(N=20), system.vehicle) == []


def _dp_oracle(system, vehicle, cfg, v0=10.0, v_min=6.0, dv=0.01, steps=31):
    """Backward recursion over a speed grid; decelerations only, best same-sign split per stage."""
    pt = system.powertrain
    v = v_min + dv * np.arange(int(round((v0 - v_min) / dv)) + 1)
    a = -dv / cfg.dt * np.arange(steps)
    V, A = np.meshgrid(v, a, indexing="ij")
    T = torque_from_acceleration(A, V, 0.0, 0.0, vehicle)
    omega = vehicle.n * V
    P = np.full(V.shape, np.inf)
    for lam in np.linspace(0.0, 1.0, 101):
        P = np.minimum(P, pt.power(lam * T, (1.0 - lam) * T, omega))
    stage = cfg.w1 * A ** 2 + cfg.w2 * P

    value = cfg.w4 * v ** 2
    idx = np.arange(v.size)[:, None] - np.arange(steps)[None, :]
    for _ in range(cfg.N):
        future = np.where(idx >= 0, value[np.clip(idx, 0, None)], np.inf)
        value = np.min(stage + future, axis=1)
    return float(value[-1])


def test_solution_matches_dynamic_programming(system):
    vehicle = VehicleParams(dT_max=1e6)
    cfg = OcpConfig(N=10, dt=0.1, use_terminal_gap=False)
    pred = PrecedingPrediction(d=np.full(11, 60.0), v=np.zeros(11), a=np.zeros(11), dt=0.1)
    problem = build_ocp(VehicleState(0.0, 10.0, 0.8), pred, [], 0.0, vehicle, system.battery,
                        system.powertrain, cfg)
    sol = solve(problem, warm_start(problem).z)
    assert sol.is_acceptable(1e-6)
    J_dp = _dp_oracle(system, vehicle, cfg)
    assert abs(sol.objective - J_dp) <= 0.01 * J_dp
