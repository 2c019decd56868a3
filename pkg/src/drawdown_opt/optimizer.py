"""Projected gradient ascent over the BHP trajectory polytope.

Works with any objective wrapped in :class:`ObjectiveHandle`: the simulator
(expensive, finite-difference gradients) or the surrogate (cheap, analytic
gradients). Every iterate is projected with the same routine the samplers use.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sampling import FEAS_TOL, ConstraintSpec, ControlTrajectory, project_feasible

EXPENSIVE = "expensive"
CHEAP = "cheap"


class OptimizationError(RuntimeError):
    """Objective failure during an optimization, tagged with where it happened."""

    def __init__(self, message, iteration=None, coordinate=None):
        self.iteration = iteration
        self.coordinate = coordinate
        super().__init__(message)


class ObjectiveHandle:
    """Counting wrapper around ``u -> J`` and an optional ``u -> grad J``."""

    def __init__(self, fn, grad=None, cost_class=EXPENSIVE, name="objective", pure=True):
        if cost_class not in (EXPENSIVE, CHEAP):
            raise ValueError(f"cost_class must be {EXPENSIVE!r} or {CHEAP!r}")
        self.fn = fn
        self.grad_fn = grad
        self.cost_class = cost_class
        self.name = name
        self.pure = pure
        self.eval_counter = 0
        self.grad_counter = 0
        self.eval_time = 0.0
        self.grad_time = 0.0

    @property
    def has_grad(self):
        return self.grad_fn is not None

    def eval(self, u):
        t0 = time.perf_counter()
        self.eval_counter += 1
        J = float(self.fn(np.asarray(u, dtype=float)))
        self.eval_time += time.perf_counter() - t0
        return J

    __call__ = eval

    def grad(self, u):
        if self.grad_fn is None:
            raise ValueError(f"{self.name}: no analytic gradient")
        t0 = time.perf_counter()
        self.grad_counter += 1
        g = np.asarray(self.grad_fn(np.asarray(u, dtype=float)), dtype=float)
        self.grad_time += time.perf_counter() - t0
        return g

    def reset(self):
        self.eval_counter = self.grad_counter = 0
        self.eval_time = self.grad_time = 0.0


@dataclass
class OptimizerConfig:
    max_iters: int = 200
    step_init: float = 0.5e6  # Pa, infinity-norm of the first trial move
    backtrack_factor: float = 0.5
    growth_factor: float = 4.0
    armijo_c: float = 1e-4
    grad_tol: float = 1e-4  # projected-gradient norm on the normalised scale
    fd_step: float = 1e4  # Pa
    step_min: float = 1.0  # Pa; smaller trial moves count as a collapsed step
    # cap on the step, in BHP ranges; far above 1 so components with small
    # gradients still move once the large ones sit on a bound
    step_max_ranges: float = 1e3
    # analytic-gradient objectives only: on a failed line search, retry along
    # the min-norm combination of the gradients either side of the kink
    ridge_steps: bool = True

    def __post_init__(self):
        for name in ("max_iters", "step_init", "armijo_c", "grad_tol", "fd_step", "step_min", "step_max_ranges"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if not self.growth_factor >= 1:
            raise ValueError("growth_factor must be >= 1")


@dataclass
class Iterate:
    iteration: int
    u: np.ndarray
    J: float
    step_size: float
    pg_norm: float


@dataclass
class OptimizationResult:
    u_star: ControlTrajectory
    J_star_est: float
    history: list
    n_objective_evals: int
    n_gradient_evals: int
    wall_time_s: float
    termination_reason: str
    cost_class: str = EXPENSIVE
    eval_time_s: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def iterate_history(self):
        return [(it.u, it.J) for it in self.history]

    @property
    def n_iterations(self):
        return max(len(self.history) - 1, 0)

    def to_csv(self, path):
        """Iterate history as ``iter, J, step_size, pg_norm, p_1..p_T``."""
        T = len(self.u_star)
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "J", "step_size", "pg_norm"] + [f"p_{t + 1}" for t in range(T)])
            for it in self.history:
                w.writerow([it.iteration, repr(float(it.J)), repr(float(it.step_size)), repr(float(it.pg_norm))]
                           + [repr(float(v)) for v in it.u])


def fd_gradient(objective: ObjectiveHandle, u, h, f0=None, bounds=None, executor=None):
    """Central-difference gradient, one-sided at active box bounds.

    ``bounds=(p_min, p_max)`` switches a coordinate to a one-sided difference
    when ``u_i +- h`` would leave the box; ``f0`` (the value at ``u``) is then
    reused, or evaluated once if not given.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    u = np.asarray(u, dtype=float)
    lo, hi = (-np.inf, np.inf) if bounds is None else bounds
    plan = []  # (i, use u+h, use u-h)
    for i in range(u.size):
        up_ok = u[i] + h <= hi
        dn_ok = u[i] - h >= lo
        plan.append((i, up_ok or not dn_ok, dn_ok or not up_ok))
    need_f0 = any(not (a and b) for _, a, b in plan)
    if need_f0 and f0 is None:
        f0 = objective.eval(u)

    points = []
    for i, up, dn in plan:
        if up:
            e = u.copy()
            e[i] += h
            points.append((i, +1, e))
        if dn:
            e = u.copy()
            e[i] -= h
            points.append((i, -1, e))

    def run(p):
        i, _, e = p
        try:
            return objective.eval(e)
        except Exception as err:
            raise OptimizationError(f"objective failed at coordinate {i}: {err}", coordinate=i) from err

    if executor is not None and objective.pure:
        vals = list(executor.map(run, points))
    else:
        vals = [run(p) for p in points]

    fp = np.full(u.size, np.nan)
    fm = np.full(u.size, np.nan)
    for (i, sign, _), v in zip(points, vals):
        if sign > 0:
            fp[i] = v
        else:
            fm[i] = v
    g = np.empty(u.size)
    for i, up, dn in plan:
        if up and dn:
            g[i] = (fp[i] - fm[i]) / (2 * h)
        elif up:
            g[i] = (fp[i] - f0) / h
        else:
            g[i] = (f0 - fm[i]) / h
    return g


def _pg_norm(u, g, spec, scale):
    """Infinity norm of the unit-step gradient map in normalised coordinates.

    With x = (u - p_min) / range and f = J / scale this is
    max |P(x + grad f) - x|, which vanishes exactly at stationary points.
    """
    r = spec.range
    gx = g * r / scale
    step = project_feasible(u + gx * r, spec)
    return float(np.max(np.abs(step - u)) / r) if u.size else 0.0


def _min_norm_combination(g1, g2):
    """Smallest-norm point of the segment [g1, g2]."""
    d = g1 - g2
    dd = float(d @ d)
    if dd == 0.0:
        return g1.copy()
    lam = min(max(-float(g2 @ d) / dd, 0.0), 1.0)
    return lam * g1 + (1.0 - lam) * g2


def _line_search(value, u, J, direction, slope_vec, step, spec, cfg, k):
    """Backtrack from ``step``; returns ``(accepted, trial, J_trial, step, last_rejected)``."""
    rejected = None
    while step >= cfg.step_min:
        trial = project_feasible(u + step * direction, spec)
        du = trial - u
        if np.max(np.abs(du)) > 0:
            Jt = value(trial, k)
            if Jt >= J + cfg.armijo_c * float(slope_vec @ du):
                return True, trial, Jt, step, rejected
            rejected = trial
        step *= cfg.backtrack_factor
    return False, None, None, step, rejected


def maximize(objective: ObjectiveHandle, u0, spec: ConstraintSpec, cfg: OptimizerConfig = None,
             executor=None, callback=None):
    """Projected gradient ascent with Armijo backtracking.

    The ascent direction is scaled so its largest component equals the current
    step (Pa); the step grows by ``growth_factor`` after an accepted move and
    shrinks by ``backtrack_factor`` on rejection.
    """
    cfg = OptimizerConfig() if cfg is None else cfg
    times = getattr(u0, "step_end_times", None)
    u = np.array(getattr(u0, "values", u0), dtype=float)
    if u.ndim != 1 or u.size == 0:
        raise ValueError("u0 must be a non-empty 1-D trajectory")
    if not spec.is_feasible(u):
        raise ValueError(f"u0 is infeasible (violation {spec.violation(u):.3g} Pa)")
    e0, g0, t0 = objective.eval_counter, objective.grad_counter, objective.eval_time
    t_start = time.perf_counter()

    def value(x, k):
        try:
            return objective.eval(x)
        except OptimizationError:
            raise
        except Exception as err:
            raise OptimizationError(f"objective failed at iteration {k}: {err}", iteration=k) from err

    def gradient(x, fx, k):
        try:
            if objective.has_grad:
                return objective.grad(x)
            return fd_gradient(objective, x, cfg.fd_step, f0=fx, bounds=(spec.p_min, spec.p_max),
                               executor=executor)
        except OptimizationError as err:
            err.iteration = k
            raise
        except Exception as err:
            raise OptimizationError(f"gradient failed at iteration {k}: {err}", iteration=k) from err

    J = value(u, 0)
    scale = max(abs(J), 1.0)
    step = cfg.step_init
    g = gradient(u, J, 0)
    pg = _pg_norm(u, g, spec, scale)
    history = [Iterate(0, u.copy(), J, 0.0, pg)]
    reason = "max_iters"
    for k in range(1, cfg.max_iters + 1):
        if pg < cfg.grad_tol:
            reason = "gradient_tolerance"
            break
        start = step
        gmax = float(np.max(np.abs(g)))
        accepted, trial, Jt, step, rejected = _line_search(value, u, J, g / gmax, g, step, spec, cfg, k)
        if not accepted and cfg.ridge_steps and objective.has_grad and rejected is not None:
            # u sits on a kink of a piecewise-smooth objective: follow the ridge
            d = _min_norm_combination(g, gradient(rejected, None, k))
            dmax = float(np.max(np.abs(d)))
            if dmax > 0:
                accepted, trial, Jt, step, _ = _line_search(value, u, J, d / dmax, d, start, spec, cfg, k)
        if not accepted:
            reason = "step_collapse"
            break
        u, J = trial, Jt
        g = gradient(u, J, k)
        pg = _pg_norm(u, g, spec, scale)
        history.append(Iterate(k, u.copy(), J, step, pg))
        if callback is not None:
            callback(history[-1])
        step = min(step * cfg.growth_factor, cfg.step_max_ranges * spec.range)
    else:
        if pg < cfg.grad_tol:
            reason = "gradient_tolerance"

    best = max(history, key=lambda it: it.J)  # accepted iterates are non-decreasing; this is the last
    wall = time.perf_counter() - t_start
    u_star = ControlTrajectory(best.u, times) if times is not None else ControlTrajectory(best.u)
    return OptimizationResult(
        u_star=u_star,
        J_star_est=best.J,
        history=history,
        n_objective_evals=objective.eval_counter - e0,
        n_gradient_evals=objective.grad_counter - g0,
        wall_time_s=wall,
        termination_reason=reason,
        cost_class=objective.cost_class,
        eval_time_s=objective.eval_time - t0,
    )


def count_report(result: OptimizationResult):
    """One benchmark-table row of evaluation counts and timings."""
    n = result.n_objective_evals
    return {
        "cost_class": result.cost_class,
        "iterations": result.n_iterations,
        "n_objective_evals": n,
        "n_gradient_evals": result.n_gradient_evals,
        "wall_time_s": result.wall_time_s,
        "mean_eval_time_s": result.eval_time_s / n if n else 0.0,
        "termination_reason": result.termination_reason,
    }


def check_history_feasible(result, spec, tol=FEAS_TOL):
    return all(spec.is_feasible(it.u, tol) for it in result.history)
