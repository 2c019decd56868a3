import time

import numpy as np
import pytest

from drawdown_opt.optimizer import (
    CHEAP, ObjectiveHandle, OptimizationError, OptimizerConfig, check_history_feasible, count_report,
    fd_gradient, maximize,
)
from drawdown_opt.sampling import ConstraintSpec, gen_moving_uniform

SPEC = ConstraintSpec()


def quad(c):
    return ObjectiveHandle(lambda u: -np.sum((u - c) ** 2) / 1e12, lambda u: -2 * (u - c) / 1e12, CHEAP)


# handle

def test_handle_counts_and_validation():
    h = ObjectiveHandle(lambda u: u.sum(), lambda u: np.ones_like(u), CHEAP)
    h(np.ones(3))
    h.eval(np.ones(3))
    h.grad(np.ones(3))
    assert (h.eval_counter, h.grad_counter) == (2, 1)
    h.reset()
    assert (h.eval_counter, h.grad_counter, h.eval_time) == (0, 0, 0.0)
    with pytest.raises(ValueError):
        ObjectiveHandle(lambda u: 0.0, cost_class="free")
    with pytest.raises(ValueError):
        ObjectiveHandle(lambda u: 0.0).grad(np.ones(2))


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(backtrack_factor=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(fd_step=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(growth_factor=0.5)


# finite differences

def test_fd_linear_exact():
    h = ObjectiveHandle(lambda u: float(np.sum(u)))
    g = fd_gradient(h, np.array([12e6, 20e6, 30e6]), 1e4)
    assert np.array_equal(g, np.ones(3))
    assert h.eval_counter == 6


def test_fd_constant_zero():
    g = fd_gradient(ObjectiveHandle(lambda u: 5.0), np.full(4, 20e6), 1e4)
    assert np.array_equal(g, np.zeros(4))


def test_fd_quadratic():
    g = fd_gradient(ObjectiveHandle(lambda u: float(np.sum(u ** 2))), np.array([1e6, 2e6, 3e6]), 1e3)
    assert np.allclose(g, [2e6, 4e6, 6e6], rtol=1e-6, atol=0)


def test_fd_one_sided_at_bounds():
    h = ObjectiveHandle(lambda u: float(np.sum(u ** 2)) / 1e6)
    u = np.array([10e6, 20e6, 38e6])
    g = fd_gradient(h, u, 1e4, bounds=(10e6, 38e6))
    # one-sided, central, one-sided, plus f(u)
    assert h.eval_counter == 5
    assert np.allclose(g, 2 * u / 1e6, rtol=1e-3)
    h.reset()
    fd_gradient(h, u, 1e4, f0=h.fn(u), bounds=(10e6, 38e6))
    assert h.eval_counter == 4


def test_fd_error_names_coordinate():
    def f(u):
        if u[1] > 20e6:
            raise RuntimeError("boom")
        return 0.0
    with pytest.raises(OptimizationError) as exc:
        fd_gradient(ObjectiveHandle(f), np.full(3, 20e6), 1e4)
    assert exc.value.coordinate == 1


def test_fd_parallel_matches_serial():
    from concurrent.futures import ThreadPoolExecutor
    h = ObjectiveHandle(lambda u: float(np.sum(np.sin(u / 1e6))))
    u = np.linspace(12e6, 30e6, 8)
    with ThreadPoolExecutor(4) as ex:
        assert np.array_equal(fd_gradient(h, u, 1e4, executor=ex), fd_gradient(h, u, 1e4))


# maximize

def test_interior_quadratic():
    c = np.array([20e6, 22e6, 24e6, 23e6, 21e6])
    res = maximize(quad(c), np.full(5, 30e6), SPEC)
    assert res.termination_reason == "gradient_tolerance"
    assert np.max(np.abs(res.u_star.values - c)) <= 1e-3 * SPEC.range


def test_interior_quadratic_fd():
    c = np.array([20e6, 22e6, 24e6])
    h = ObjectiveHandle(lambda u: -np.sum((u - c) ** 2) / 1e12)
    res = maximize(h, np.full(3, 30e6), SPEC)
    assert np.max(np.abs(res.u_star.values - c)) <= 1e-3 * SPEC.range
    assert res.n_gradient_evals == 0 and res.n_objective_evals > 6


def test_linear_pins_at_p_min():
    spec = ConstraintSpec(dp_max=28e6)
    h = ObjectiveHandle(lambda u: -float(np.sum(u)) / 1e6, lambda u: -np.ones_like(u) / 1e6, CHEAP)
    res = maximize(h, np.full(6, 30e6), spec)
    assert np.array_equal(res.u_star.values, np.full(6, 10e6))
    # with the default band the lower corner is still reachable
    res = maximize(h, np.linspace(38e6, 23e6, 6), SPEC)
    assert np.allclose(res.u_star.values, 10e6, rtol=0, atol=1e-6)


def test_constant_returns_u0():
    u0 = np.linspace(38e6, 20e6, 7)
    h = ObjectiveHandle(lambda u: 3.0, lambda u: np.zeros_like(u), CHEAP)
    res = maximize(h, u0, SPEC)
    assert res.termination_reason == "gradient_tolerance"
    assert np.array_equal(res.u_star.values, u0)
    assert res.J_star_est == 3.0 and res.n_iterations == 0
    rep = count_report(res)
    assert rep["iterations"] == 0 and rep["n_gradient_evals"] == 1


def test_infeasible_start_rejected():
    with pytest.raises(ValueError, match="infeasible"):
        maximize(quad(np.full(3, 20e6)), np.array([38e6, 10e6, 20e6]), SPEC)


@pytest.mark.parametrize("monotone", [False, True])
def test_iterates_feasible_and_ascending(monotone):
    spec = ConstraintSpec(monotone=monotone)
    rng = np.random.default_rng(0)
    for s in range(10):
        c = rng.uniform(0, 50e6, 12)
        w = rng.uniform(0.2, 5, 12)
        h = ObjectiveHandle(lambda u: -np.sum(w * (u - c) ** 2) / 1e12, lambda u: -2 * w * (u - c) / 1e12, CHEAP)
        u0 = gen_moving_uniform(spec, 12, 3e6, s).values
        res = maximize(h, u0, spec, OptimizerConfig(max_iters=50))
        assert check_history_feasible(res, spec)
        Js = [J for _, J in res.iterate_history]
        assert np.all(np.diff(Js) >= 0)
        assert res.J_star_est >= Js[0]
        if res.termination_reason == "gradient_tolerance":
            assert res.history[-1].pg_norm < OptimizerConfig().grad_tol


def test_objective_failure_carries_iteration():
    calls = {"n": 0}

    def f(u):
        calls["n"] += 1
        if calls["n"] > 3:
            raise RuntimeError("simulator down")
        return -float(np.sum(u)) / 1e6

    with pytest.raises(OptimizationError) as exc:
        maximize(ObjectiveHandle(f, lambda u: -np.ones_like(u) / 1e6, CHEAP), np.full(4, 30e6), SPEC)
    assert exc.value.iteration is not None and exc.value.iteration >= 1


def test_callback_and_history_csv(tmp_path):
    seen = []
    res = maximize(quad(np.full(4, 20e6)), np.full(4, 30e6), SPEC, callback=seen.append)
    assert [it.iteration for it in seen] == list(range(1, res.n_iterations + 1))
    path = tmp_path / "h.csv"
    res.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,J,step_size,pg_norm,p_1,p_2,p_3,p_4"
    assert len(lines) == len(res.history) + 1


def test_count_report_timing_stub():
    def slow(u):
        time.sleep(0.001)
        return float(u.sum())
    h = ObjectiveHandle(slow)
    for _ in range(10):
        h.eval(np.ones(2))
    from drawdown_opt.optimizer import OptimizationResult
    from drawdown_opt.sampling import ControlTrajectory
    res = OptimizationResult(ControlTrajectory(np.ones(2)), 2.0, [], h.eval_counter, 0, h.eval_time, "max_iters",
                             eval_time_s=h.eval_time)
    rep = count_report(res)
    assert rep["n_objective_evals"] == 10
    assert 0.010 <= rep["wall_time_s"] < 0.05
    assert rep["mean_eval_time_s"] == pytest.approx(rep["wall_time_s"] / 10)


def test_deterministic():
    c = np.array([20e6, 25e6, 30e6, 28e6])
    a = maximize(quad(c), np.full(4, 12e6), SPEC)
    b = maximize(quad(c), np.full(4, 12e6), SPEC)
    assert np.array_equal(a.u_star.values, b.u_star.values)
    assert [it.J for it in a.history] == [it.J for it in b.history]


def test_ridge_step_follows_concave_kink():
    # ascent runs along the kink u1 == u2; plain backtracking stalls on it
    spec = ConstraintSpec(dp_max=28e6)

    def f(u):
        return (-10 * abs(u[0] - u[1]) + u[0] + u[1]) / 1e6

    def g(u):
        s = 1.0 if u[0] >= u[1] else -1.0
        return np.array([1 - 10 * s, 1 + 10 * s]) / 1e6

    u0 = np.array([20e6, 20.5e6])
    res = maximize(ObjectiveHandle(f, g, CHEAP), u0, spec, OptimizerConfig(max_iters=200))
    assert np.allclose(res.u_star.values, 38e6, rtol=0, atol=1e3)
    plain = maximize(ObjectiveHandle(f, g, CHEAP), u0, spec, OptimizerConfig(max_iters=200, ridge_steps=False))
    assert plain.termination_reason == "step_collapse"
    assert np.max(plain.u_star.values) < 25e6
