"""Study orchestration: physics vs proxy optimisation, validation and tables."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import SCHEMAS, __version__
from .optimizer import CHEAP, EXPENSIVE, ObjectiveHandle, OptimizerConfig, count_report, maximize
from .reservoir import DAY, scenario_models, simulate
from .sampling import ConstraintSpec, ControlTrajectory, Dataset, build_dataset, project_feasible
from .surrogate import SurrogateModel, TrainConfig, evaluate_metrics, forward, input_gradient, train

INITIAL_GATE = 0.02  # proxy error on initial trajectories
FINAL_GATE = 0.05  # proxy error / realised gap at the optimum
DIVERGENCE_TOL = 0.10  # RMS distance between optima, fraction of the BHP range


def relative_error(J_hat, J):
    """|J_hat - J| / J for a positive reference J."""
    if not J > 0:
        raise ValueError(f"reference J must be > 0, got {J!r}")
    return abs(J_hat - J) / J


# ---------------------------------------------------------------------------
# objectives and single optimisations
# ---------------------------------------------------------------------------


def physics_objective(model):
    return ObjectiveHandle(lambda u: simulate(model, u).J, cost_class=EXPENSIVE, name="simulator")


def proxy_objective(proxy):
    """Surrogate as a cheap objective; an ObjectiveHandle passes through unchanged."""
    if isinstance(proxy, ObjectiveHandle):
        return proxy
    return ObjectiveHandle(lambda u: forward(proxy, u), grad=lambda u: input_gradient(proxy, u),
                           cost_class=CHEAP, name="proxy")


def _proxy_value(proxy, u):
    # uncounted evaluation for reporting
    if isinstance(proxy, ObjectiveHandle):
        return float(proxy.fn(np.asarray(u, dtype=float)))
    if isinstance(proxy, SurrogateModel):
        return float(forward(proxy, u))
    return float(proxy(u))


def _simulator(model, simulator=None):
    """``u -> J``: the model's simulator unless a stand-in is given."""
    if simulator is not None:
        return lambda u: float(simulator(np.asarray(u, dtype=float)))
    return lambda u: simulate(model, u).J


def _as_traj(u0, model=None):
    if isinstance(u0, ControlTrajectory):
        return u0
    if model is not None:
        return ControlTrajectory.for_model(model, u0)
    return ControlTrajectory(u0)


def optimize_physics(model, u0, spec: ConstraintSpec, cfg: OptimizerConfig = None, executor=None, objective=None):
    """Projected ascent on the simulator with finite-difference gradients."""
    objective = physics_objective(model) if objective is None else objective
    return maximize(objective, _as_traj(u0, model), spec, cfg, executor=executor)


def optimize_proxy(proxy, u0, spec: ConstraintSpec, cfg: OptimizerConfig = None, objective=None):
    """Projected ascent on the surrogate with analytic input gradients."""
    objective = proxy_objective(proxy) if objective is None else objective
    return maximize(objective, _as_traj(u0), spec, cfg)


@dataclass
class ValidationReport:
    u_star: np.ndarray
    J_proxy: float
    J_sim: float
    relative_error: float
    passed: bool
    retrain_recommended: bool
    refined_model: object = None
    refined_J_proxy: float = None
    refined_relative_error: float = None


def hybrid_validate(proxy, model, u_star, tol=FINAL_GATE, spec=None, dataset: Dataset = None,
                    train_cfg: TrainConfig = None, retrain=False, simulator=None):
    """Re-evaluate a proxy optimum with the simulator.

    With ``retrain=True`` and a failing check, ``(u_star, J_sim)`` is appended
    to ``dataset`` and the proxy is retrained once.
    """
    u = np.asarray(getattr(u_star, "values", u_star), dtype=float)
    if spec is not None and not spec.is_feasible(u):
        raise ValueError(f"u_star is infeasible (violation {spec.violation(u):.3g} Pa)")
    J_sim = _simulator(model, simulator)(u)
    J_proxy = _proxy_value(proxy, u)
    err = relative_error(J_proxy, J_sim)
    rep = ValidationReport(u, J_proxy, J_sim, err, err <= tol, err > tol)
    if retrain and rep.retrain_recommended:
        if dataset is None:
            raise ValueError("retraining needs the training dataset")
        dataset.append(_as_traj(u, model), J_sim, "refinement")
        refined, _ = train(dataset, train_cfg)
        rep.refined_model = refined
        rep.refined_J_proxy = float(forward(refined, u))
        rep.refined_relative_error = relative_error(rep.refined_J_proxy, J_sim)
    return rep


def proxy_assisted(model, proxy, u0, spec, cfg: OptimizerConfig = None, cold_start=True, executor=None,
                   simulator=None):
    """Proxy optimisation first, then physics optimisation from the proxy optimum.

    Returns ``(physics_result, savings)``; ``savings`` compares simulator
    evaluations against a cold physics start from ``u0`` when ``cold_start``.
    ``simulator`` (``u -> J``) stands in for the model in tests.
    """
    def sim_objective():
        if simulator is None:
            return physics_objective(model)
        return ObjectiveHandle(_simulator(model, simulator), cost_class=EXPENSIVE, name="simulator")

    first = optimize_proxy(proxy, u0, spec, cfg)
    warm = optimize_physics(model, first.u_star.values, spec, cfg, executor=executor, objective=sim_objective())
    savings = {
        "proxy_evals": first.n_objective_evals,
        "proxy_grad_evals": first.n_gradient_evals,
        "proxy_J_star": first.J_star_est,
        "warm_sim_evals": warm.n_objective_evals,
        "warm_J_star": warm.J_star_est,
        "warm_iterations": warm.n_iterations,
    }
    if cold_start:
        cold = optimize_physics(model, u0, spec, cfg, executor=executor, objective=sim_objective())
        savings.update(cold_sim_evals=cold.n_objective_evals, cold_J_star=cold.J_star_est,
                       cold_iterations=cold.n_iterations,
                       saved_sim_evals=cold.n_objective_evals - warm.n_objective_evals)
    return warm, savings


# ---------------------------------------------------------------------------
# initial trajectories and the out-of-distribution diagnostic
# ---------------------------------------------------------------------------


def aggressive_trajectory(spec: ConstraintSpec, T):
    """Fastest feasible drawdown: start at p_max, drop dp_max per step to p_min."""
    return np.maximum(spec.p_max - spec.dp_max * np.arange(T), spec.p_min)


def standard_initializations(spec: ConstraintSpec, T):
    """Six named starts from conservative to aggressive, all feasible."""
    r = spec.range
    t = np.arange(T) / max(T - 1, 1)
    half = T // 2
    inits = {
        "X1": aggressive_trajectory(spec, T),
        "X2": np.full(T, spec.p_min + 0.9 * r),  # conservative hold
        "X3": spec.p_max - r * t,  # straight decline over the horizon
        "X4": np.full(T, spec.p_min + 0.5 * r),
        "X5": np.concatenate([np.full(half, spec.p_min + 0.7 * r),
                              np.linspace(spec.p_min + 0.7 * r, spec.p_min + 0.2 * r, T - half + 1)[1:]]),
        # saw-tooth around mid range: irregular on purpose
        "X6": spec.p_min + 0.5 * r + 0.4 * spec.dp_max * np.where(np.arange(T) % 2 == 0, 1.0, -1.0),
    }
    return {k: project_feasible(v, spec) for k, v in inits.items()}


@dataclass
class TrainingEnvelope:
    """Per-step [min, max] of training BHPs and of their step increments."""

    lo: np.ndarray
    hi: np.ndarray
    dlo: np.ndarray
    dhi: np.ndarray

    @classmethod
    def from_dataset(cls, dataset):
        U = dataset.U if hasattr(dataset, "U") else np.asarray(dataset, dtype=float)
        dU = np.diff(U, axis=1)
        return cls(U.min(0), U.max(0), dU.min(0), dU.max(0))

    def check(self, u, tol=1e-6):
        """``(is_ood, reason)``; tol is in Pa."""
        u = np.asarray(getattr(u, "values", u), dtype=float)
        out = np.flatnonzero((u < self.lo - tol) | (u > self.hi + tol))
        if out.size:
            return True, f"level outside envelope at steps {(out + 1).tolist()}"
        du = np.diff(u)
        out = np.flatnonzero((du < self.dlo - tol) | (du > self.dhi + tol))
        if out.size:
            return True, f"increment outside envelope at steps {(out + 2).tolist()}"
        return False, ""


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return "" if v is None else v


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if hasattr(v, "__dataclass_fields__"):
        return _jsonable(asdict(v))
    return v


@dataclass
class StudyTable:
    name: str
    columns: list
    rows: list  # dicts keyed by column
    provenance: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)  # name -> (columns, rows), long-format plot data

    def column(self, name):
        return [r.get(name) for r in self.rows]

    def to_csv(self, path):
        """Write ``path``, ``path.provenance.json`` and ``<stem>.<extra>.csv`` files."""
        path = Path(path)
        _write_rows(path, self.columns, self.rows)
        prov = {"schema": SCHEMAS["study_table"], "study": self.name, "package_version": __version__,
                "columns": list(self.columns), "extras": sorted(self.extras), **_jsonable(self.provenance)}
        Path(str(path) + ".provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")
        for name, (cols, rows) in self.extras.items():
            _write_rows(path.with_name(f"{path.stem}.{name}.csv"), cols, rows)
        return path


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _provenance(model=None, spec=None, cfg=None, train_cfg=None, **extra):
    prov = dict(extra)
    if model is not None:
        prov["model_fingerprint"] = model.fingerprint()
        prov["model_config"] = asdict(model.config)
    if spec is not None:
        prov["constraint_spec"] = asdict(spec)
    if cfg is not None:
        prov["optimizer_config"] = asdict(cfg)
    if train_cfg is not None:
        prov["train_config"] = asdict(train_cfg)
    return prov


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------


def baseline(base_config=None, spec=None, trajectory=None, names=("flow_only", "low", "medium", "high")):
    """Cumulative production per control step for the stress-sensitivity presets."""
    spec = ConstraintSpec() if spec is None else spec
    models = scenario_models(base_config, names)
    first = next(iter(models.values()))
    u = aggressive_trajectory(spec, first.n_control) if trajectory is None else np.asarray(
        getattr(trajectory, "values", trajectory), dtype=float)
    cum = {n: simulate(m, u).cumulative_per_control_step for n, m in models.items()}
    days = first.control_step_ends / DAY
    rows = []
    for c in range(first.n_control):
        row = {"step": c + 1, "time_days": days[c], "bhp_pa": u[c]}
        row.update({n: cum[n][c] for n in names})
        rows.append(row)
    long_rows = [{"scenario": n, "step": c + 1, "time_days": days[c], "cum_oil_m3": cum[n][c]}
                 for n in names for c in range(first.n_control)]
    return StudyTable("baseline", ["step", "time_days", "bhp_pa", *names], rows,
                      _provenance(first, spec, scenarios=list(names)),
                      {"cumulative_long": (["scenario", "step", "time_days", "cum_oil_m3"], long_rows)})


def _traj_rows(label, engine, u, days):
    return [{"init": label, "engine": engine, "step": t + 1, "time_days": days[t], "bhp_pa": u[t]}
            for t in range(len(u))]


def multi_init_study(model, proxy, inits, spec, cfg: OptimizerConfig = None, envelope: TrainingEnvelope = None,
                     gate=FINAL_GATE, divergence_tol=DIVERGENCE_TOL, physics=True, executor=None,
                     simulator=None):
    """Physics and proxy optimisation from each start, with proxy validation.

    A failing row is recorded with its error instead of aborting the study.
    ``problematic`` rows exceed the gate; ``explained`` says whether the OOD
    diagnostic or the divergence check accounts for them. ``simulator``
    (``u -> J``) stands in for the model's simulator.
    """
    sim = _simulator(model, simulator)
    cfg = OptimizerConfig() if cfg is None else cfg
    inits = dict(inits) if isinstance(inits, dict) else {f"X{i + 1}": u for i, u in enumerate(inits)}
    if len(inits) < 1:
        raise ValueError("need at least one initial trajectory")
    days = model.control_step_ends / DAY
    rows, traj = [], []
    for label, u0 in inits.items():
        u0 = np.asarray(getattr(u0, "values", u0), dtype=float)
        row = {"init": label}
        try:
            J0 = sim(u0)
            J0p = _proxy_value(proxy, u0)
            row.update(J_init_sim=J0, J_init_proxy=J0p, init_error=relative_error(J0p, J0))
            pres = optimize_proxy(proxy, u0, spec, cfg)
            up = pres.u_star.values
            Jp_sim = sim(up)
            row.update(J_proxy_star=pres.J_star_est, J_sim_at_proxy_star=Jp_sim,
                       final_error=relative_error(pres.J_star_est, Jp_sim), proxy_iters=pres.n_iterations,
                       proxy_evals=pres.n_objective_evals, proxy_grad_evals=pres.n_gradient_evals)
            traj += _traj_rows(label, "init", u0, days) + _traj_rows(label, "proxy", up, days)
            if physics:
                obj = None if simulator is None else ObjectiveHandle(sim, cost_class=EXPENSIVE, name="simulator")
                phys = optimize_physics(model, u0, spec, cfg, executor=executor, objective=obj)
                uf = phys.u_star.values
                dist = float(np.sqrt(np.mean((up - uf) ** 2)) / spec.range)
                row.update(J_physics_star=phys.J_star_est, realized_gap=relative_error(Jp_sim, phys.J_star_est),
                           trajectory_distance=dist, physics_iters=phys.n_iterations,
                           physics_evals=phys.n_objective_evals, divergent=dist > divergence_tol)
                traj += _traj_rows(label, "physics", uf, days)
            if envelope is not None:
                row["ood_init"], _ = envelope.check(u0)
                row["ood_star"], row["ood_reason"] = envelope.check(up)
            bad = row["final_error"] > gate or row.get("realized_gap", 0.0) > gate
            row["problematic"] = bad
            row["explained"] = (not bad) or bool(row.get("ood_star") or row.get("ood_init") or row.get("divergent"))
            row["status"] = "ok"
        except Exception as err:  # keep the study going
            row.update(status="failed", error=f"{type(err).__name__}: {err}".replace("\n", " "),
                       problematic=True, explained=False)
        rows.append(row)
    cols = ["init", "status", "J_init_sim", "J_init_proxy", "init_error", "J_proxy_star", "J_sim_at_proxy_star",
            "final_error", "proxy_iters", "proxy_evals", "proxy_grad_evals"]
    if physics:
        cols += ["J_physics_star", "realized_gap", "trajectory_distance", "physics_iters", "physics_evals",
                 "divergent"]
    if envelope is not None:
        cols += ["ood_init", "ood_star", "ood_reason"]
    cols += ["problematic", "explained", "error"]
    prov = _provenance(model, spec, cfg, gate=gate, divergence_tol=divergence_tol,
                       inits={k: np.asarray(getattr(v, "values", v)).tolist() for k, v in inits.items()})
    return StudyTable("multi_init", cols, rows, prov,
                      {"trajectories": (["init", "engine", "step", "time_days", "bhp_pa"], traj)})


def sampling_comparison(model, strategies, N, spec, cfg: OptimizerConfig = None, seed=0,
                        train_cfg: TrainConfig = None, inits=None, gate=FINAL_GATE, test_set: Dataset = None,
                        dataset_spec: ConstraintSpec = None, executor=None):
    """Train one proxy per sampling strategy and score it before and after optimisation.

    Errors are means over ``inits`` (the standard starts by default):
    ``initial_error`` at the starts and ``final_error`` at the proxy optima,
    both against the simulator. ``coverage`` is the fraction of starts and
    optima inside the training envelope. ``dataset_spec`` lets the training
    data come from a different constraint set than the optimisation.
    """
    cfg = OptimizerConfig() if cfg is None else cfg
    train_cfg = TrainConfig.study() if train_cfg is None else train_cfg
    inits = standard_initializations(spec, model.n_control) if inits is None else dict(inits)
    data_spec = spec if dataset_spec is None else dataset_spec
    init_J = {k: simulate(model, u).J for k, u in inits.items()}
    rows, parity = [], []
    for strategy in strategies:
        row = {"strategy": strategy}
        try:
            ds = build_dataset(model, strategy, N, seed, data_spec, executor=executor)
            proxy, rep = train(ds, train_cfg)
            env = TrainingEnvelope.from_dataset(ds)
            e_init, e_fin, inside = [], [], []
            for k, u0 in inits.items():
                Jp0 = float(forward(proxy, u0))
                e_init.append(relative_error(Jp0, init_J[k]))
                res = optimize_proxy(proxy, u0, spec, cfg)
                Js = simulate(model, res.u_star.values).J
                e_fin.append(relative_error(res.J_star_est, Js))
                inside += [not env.check(u0)[0], not env.check(res.u_star.values)[0]]
                parity.append({"strategy": strategy, "init": k, "point": "initial", "J_sim": init_J[k],
                               "J_proxy": Jp0})
                parity.append({"strategy": strategy, "init": k, "point": "optimum", "J_sim": Js,
                               "J_proxy": res.J_star_est})
            cov = float(np.mean(inside))
            row.update(N=N, initial_error=float(np.mean(e_init)), final_error=float(np.mean(e_fin)),
                       max_final_error=float(np.max(e_fin)), coverage=cov, coverage_label=_coverage_label(cov),
                       final_pass=float(np.mean(e_fin)) <= gate, best_epoch=rep.best_epoch,
                       val_mse=float(rep.val_mse[rep.best_epoch - 1]))
            if test_set is not None:
                m = evaluate_metrics(proxy, test_set)
                row.update(test_mre=m.mean_relative_error, test_r2=m.r2)
            row["status"] = "ok"
        except Exception as err:
            row.update(status="failed", error=f"{type(err).__name__}: {err}".replace("\n", " "))
        rows.append(row)
    cols = ["strategy", "status", "N", "coverage", "coverage_label", "initial_error", "final_error",
            "max_final_error", "final_pass", "best_epoch", "val_mse"]
    if test_set is not None:
        cols += ["test_mre", "test_r2"]
    cols.append("error")
    prov = _provenance(model, spec, cfg, train_cfg, seed=seed, N=N, strategies=list(strategies),
                       dataset_spec=asdict(data_spec), inits=sorted(inits))
    return StudyTable("sampling", cols, rows, prov,
                      {"parity": (["strategy", "init", "point", "J_sim", "J_proxy"], parity)})


def parity(proxy, dataset: Dataset, envelope: TrainingEnvelope = None):
    """Proxy prediction against the simulator label for every sample."""
    pred = np.atleast_1d(forward(proxy, dataset.U)) if len(dataset) else np.empty(0)
    rows = []
    for i, (s, p) in enumerate(zip(dataset.samples, pred)):
        row = {"index": i, "tag": s.tag, "J_sim": s.J, "J_proxy": float(p),
               "rel_error": relative_error(float(p), s.J) if s.J > 0 else None}
        if envelope is not None:
            row["ood"], _ = envelope.check(s.trajectory.values)
        rows.append(row)
    m = evaluate_metrics(proxy, dataset)
    cols = ["index", "tag", "J_sim", "J_proxy", "rel_error"] + (["ood"] if envelope is not None else [])
    prov = {"dataset_fingerprint": dataset.model_fingerprint, "dataset_seed": dataset.seed,
            "metrics": asdict(m), "proxy_meta": proxy.train_meta}
    return StudyTable("parity", cols, rows, prov)


def _coverage_label(frac):
    if frac >= 0.999:
        return "in-distribution"
    if frac >= 0.5:
        return "mostly in-distribution"
    if frac > 0:
        return "partially out-of-distribution"
    return "out-of-distribution"


# reference figures at field scale, printed beside the measured desk-scale ones
FIELD_SCALE = {
    "single_sim_s": "300-1080",
    "physics_opt_s": "86400-172800",
    "proxy_opt_s": "60-120",
    "speedup": "~1000",
}


def _timed(fn, repeats):
    fn()  # warm-up, excluded
    t = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        t.append(time.perf_counter() - t0)
    return float(np.median(t))


def benchmark(model, proxy, spec, cfg: OptimizerConfig = None, u0=None, repeats=3, physics_result=None,
              simulator=None):
    """Wall-clock comparison of one evaluation and one full optimisation per engine."""
    cfg = OptimizerConfig() if cfg is None else cfg
    u0 = standard_initializations(spec, model.n_control)["X3"] if u0 is None else np.asarray(
        getattr(u0, "values", u0), dtype=float)
    sim = (lambda u: simulate(model, u).J) if simulator is None else simulator
    t_sim = _timed(lambda: sim(u0), repeats)
    t_proxy = _timed(lambda: _proxy_value(proxy, u0), max(repeats, 50))
    phys_obj = ObjectiveHandle(sim, cost_class=EXPENSIVE, name="simulator")
    t0 = time.perf_counter()
    phys = physics_result if physics_result is not None else maximize(phys_obj, u0, spec, cfg)
    t_phys = phys.wall_time_s if physics_result is not None else time.perf_counter() - t0
    optimize_proxy(proxy, u0, spec, cfg)  # warm-up
    t0 = time.perf_counter()
    prox = optimize_proxy(proxy, u0, spec, cfg)
    t_prox = time.perf_counter() - t0
    rows = [
        {"metric": "single_sim_s", "physics": t_sim, "proxy": t_proxy, "ratio": t_sim / t_proxy},
        {"metric": "optimization_s", "physics": t_phys, "proxy": t_prox, "ratio": t_phys / t_prox},
        {"metric": "objective_evals", "physics": phys.n_objective_evals, "proxy": prox.n_objective_evals,
         "ratio": phys.n_objective_evals / max(prox.n_objective_evals, 1)},
        {"metric": "gradient_evals", "physics": phys.n_gradient_evals, "proxy": prox.n_gradient_evals,
         "ratio": None},
        {"metric": "J_star", "physics": phys.J_star_est, "proxy": prox.J_star_est,
         "ratio": prox.J_star_est / phys.J_star_est if phys.J_star_est else None},
    ]
    field_ref = {"single_sim_s": FIELD_SCALE["single_sim_s"], "optimization_s": FIELD_SCALE["physics_opt_s"]}
    for r in rows:
        r["field_scale_physics"] = field_ref.get(r["metric"], "")
    rows[1]["field_scale_ratio"] = FIELD_SCALE["speedup"]
    prov = _provenance(model, spec, cfg, repeats=repeats, physics=count_report(phys), proxy=count_report(prox),
                       note="timings are wall-clock and vary between runs")
    return StudyTable("benchmark", ["metric", "physics", "proxy", "ratio", "field_scale_physics",
                                    "field_scale_ratio"], rows, prov)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

FIGURES = {
    # figure analogue -> (study csv stem, extra name or None)
    "fig_cumulative_by_scenario": ("baseline", "cumulative_long"),
    "fig_optimal_trajectories": ("multi_init", "trajectories"),
    "fig_proxy_parity": ("parity", None),
    "fig_sampling_parity": ("sampling", "parity"),
    "fig_problem_cases": ("multi_init", None),
}


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report(study_dir, out_dir=None):
    """Summarise study CSVs in ``study_dir`` and write long-format figure data.

    Returns the summary text; figure CSVs go to ``out_dir`` (default
    ``study_dir/figures``).
    """
    study_dir = Path(study_dir)
    out_dir = study_dir / "figures" if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines, written = [], []
    for prov_path in sorted(study_dir.glob("*.csv.provenance.json")):
        prov = json.loads(prov_path.read_text())
        csv_path = Path(str(prov_path)[: -len(".provenance.json")])
        rows = _read_rows(csv_path)
        lines.append(f"[{prov.get('study', csv_path.stem)}] {csv_path.name}: {len(rows)} rows")
        lines += _summarise(prov.get("study"), rows)
        stem = csv_path.stem
        for fig, (study, extra) in FIGURES.items():
            if prov.get("study") != study:
                continue
            src = csv_path.with_name(f"{stem}.{extra}.csv") if extra else csv_path
            if not src.exists():
                continue
            data = _read_rows(src)
            if fig == "fig_problem_cases":
                data = [r for r in data if r.get("problematic") == "1"]
            dst = out_dir / f"{fig}.csv"
            cols = list(data[0]) if data else []
            _write_rows(dst, cols, data)
            written.append(dst.name)
    lines.append("figure data: " + (", ".join(sorted(written)) if written else "none"))
    text = "\n".join(lines) + "\n"
    (out_dir / "summary.txt").write_text(text)
    return text


def _summarise(study, rows):
    def f(r, k):
        try:
            return float(r[k])
        except (KeyError, TypeError, ValueError):
            return float("nan")

    out = []
    if study == "baseline":
        last = rows[-1]
        out += [f"  final cumulative {k}: {f(last, k):.6g} m3" for k in last if k not in ("step", "time_days",
                                                                                         "bhp_pa")]
    elif study == "multi_init":
        for r in rows:
            flag = " PROBLEMATIC" if r.get("problematic") == "1" else ""
            out.append(f"  {r['init']}: final_error={f(r, 'final_error'):.4f} "
                       f"realized_gap={f(r, 'realized_gap'):.4f}{flag}")
    elif study == "sampling":
        for r in rows:
            out.append(f"  {r['strategy']}: initial={f(r, 'initial_error'):.4f} final={f(r, 'final_error'):.4f} "
                       f"coverage={r.get('coverage_label', '')}")
    elif study == "benchmark":
        for r in rows:
            out.append(f"  {r['metric']}: physics={r['physics']} proxy={r['proxy']} ratio={r['ratio']}")
    return out
