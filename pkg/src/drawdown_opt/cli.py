"""Command-line entry point: ``drawdown-opt <command> ...``.

Exit codes:
  0  success
  1  unexpected internal error
  2  bad command line (unknown flag, missing argument)
  3  invalid input content (config key, CSV or model schema)
  4  input file missing or unreadable, or output not writable
  5  simulation failure (solver or coupling)
  6  optimisation failure

Failures print one line to stderr:
  error code=<n> kind=<kind> message=<text>
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import SCHEMAS, __version__
from .optimizer import OptimizationError, OptimizerConfig
from .reservoir import ConfigError, ModelConfig, SimulationError, build_model, parse_config, simulate
from .sampling import STRATEGIES, ConstraintSpec, Dataset, build_dataset
from .surrogate import SurrogateFormatError, TrainConfig, load_model, save_model, train
from . import workflow

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INPUT, EXIT_IO, EXIT_SIM, EXIT_OPT = 0, 1, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code, kind, message):
        self.code, self.kind = code, kind
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


# ---------------------------------------------------------------------------
# input helpers
# ---------------------------------------------------------------------------


def _read_text(path):
    try:
        return Path(path).read_text()
    except OSError as err:
        raise CliError(EXIT_IO, "io", f"{path}: {err.strerror or err}") from None


def _model_config(args):
    cfg = parse_config(_read_text(args.config)) if args.config else ModelConfig()
    if args.scenario:
        cfg = cfg.with_scenario(args.scenario)
    if args.set:
        cfg = parse_config("\n".join(args.set), base=cfg)
    return cfg


def _spec(args):
    return ConstraintSpec(args.p_min, args.p_max, args.dp_max, args.monotone)


def _executor(args):
    return ThreadPoolExecutor(args.threads) if args.threads and args.threads > 1 else None


def _read_trajectory(path, model):
    """One-column ``bhp_pa`` CSV, or a ``p_1..p_T`` header with one data row."""
    if not Path(path).exists():
        _missing(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(EXIT_INPUT, "schema", f"{path}: empty trajectory file")
    header = [h.strip() for h in rows[0]]
    try:
        if "bhp_pa" in header:
            j = header.index("bhp_pa")
            vals = [float(r[j]) for r in rows[1:] if r]
        elif header and header[0] == "p_1":
            vals = [float(v) for v in rows[1]]
        else:
            raise CliError(EXIT_INPUT, "schema", f"{path}: need a bhp_pa column or a p_1..p_T header")
    except (ValueError, IndexError) as err:
        raise CliError(EXIT_INPUT, "schema", f"{path}: {err}") from None
    if len(vals) != model.n_control:
        raise CliError(EXIT_INPUT, "schema", f"{path}: {len(vals)} values for {model.n_control} control steps")
    return np.array(vals)


def _missing(path):
    raise CliError(EXIT_IO, "io", f"{path}: no such file")


def _initial(args, model, spec):
    name = args.init
    inits = workflow.standard_initializations(spec, model.n_control)
    if name in inits:
        return inits[name]
    u = _read_trajectory(name, model)
    if not spec.is_feasible(u):
        raise CliError(EXIT_INPUT, "schema", f"{name}: initial trajectory violates the constraints "
                                             f"by {spec.violation(u):.3g} Pa")
    return u


def _load_proxy(path):
    if not Path(path).exists():
        _missing(path)
    return load_model(path)


def _load_dataset(path):
    if not Path(path).exists():
        _missing(path)
    return Dataset.from_csv(path)


def _opt_cfg(args):
    return OptimizerConfig(max_iters=args.max_iters, step_init=args.step_init, fd_step=args.fd_step,
                           grad_tol=args.grad_tol)


def _train_cfg(args):
    base = TrainConfig.study() if args.preset == "study" else TrainConfig()
    flags = {"learning_rate": args.lr, "batch_size": args.batch, "max_epochs": args.epochs,
             "early_stop_patience": args.patience, "l2_weight_decay": args.l2, "val_fraction": args.val_fraction}
    over = {k: v for k, v in flags.items() if v is not None}
    return dataclasses.replace(base, rng_seed=args.seed, **over)


def _out_dir(path):
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CliError(EXIT_IO, "io", f"{p}: {err.strerror or err}") from None
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    model = build_model(_model_config(args))
    u = _read_trajectory(args.trajectory, model)
    res = simulate(model, u)
    res.to_csv(args.out)
    print(f"J={res.J!r} mass_balance_error={res.mass_balance_error:.3e} out={args.out}")


def cmd_gen_data(args):
    if args.strategy not in STRATEGIES:
        raise CliError(EXIT_INPUT, "schema", f"unknown strategy {args.strategy!r}; "
                                             f"choose from {', '.join(sorted(STRATEGIES))}")
    model = build_model(_model_config(args))
    ds = build_dataset(model, args.strategy, args.N, args.seed, _spec(args), executor=_executor(args))
    ds.to_csv(args.out)
    print(f"samples={len(ds)} out={args.out}")


def cmd_train(args):
    ds = _load_dataset(args.dataset)
    proxy, rep = train(ds, _train_cfg(args))
    save_model(proxy, args.out)
    stem = Path(args.out)
    rep.to_csv(stem.with_name(stem.stem + ".history.csv"))
    val = ds.subset(rep.val_idx)
    workflow.parity(proxy, val, workflow.TrainingEnvelope.from_dataset(ds.subset(rep.train_idx))).to_csv(
        stem.with_name(stem.stem + ".parity.csv"))
    print(f"best_epoch={rep.best_epoch} val_mse={rep.val_mse[rep.best_epoch - 1]:.6g} out={args.out}")


RESULT_COLS = ["engine", "stage", "J_est", "J_sim", "relative_error", "passed", "iterations", "objective_evals",
               "gradient_evals", "termination"]


def _result_row(engine, stage, res, T):
    row = {"engine": engine, "stage": stage, "J_est": res.J_star_est, "iterations": res.n_iterations,
           "objective_evals": res.n_objective_evals, "gradient_evals": res.n_gradient_evals,
           "termination": res.termination_reason}
    row.update({f"p_{t + 1}": v for t, v in enumerate(res.u_star.values)})
    return row


def cmd_optimize(args):
    model = build_model(_model_config(args))
    spec = _spec(args)
    cfg = _opt_cfg(args)
    u0 = _initial(args, model, spec)
    out = _out_dir(args.out)
    T = model.n_control
    rows = []
    engine = args.engine
    if engine == "physics":
        res = workflow.optimize_physics(model, u0, spec, cfg, executor=_executor(args))
        rows.append(_result_row(engine, "physics", res, T) | {"J_sim": res.J_star_est})
        res.to_csv(out / "history.csv")
    else:
        if not args.model:
            raise CliError(EXIT_USAGE, "usage", f"optimize {engine} needs --model")
        proxy = _load_proxy(args.model)
        if engine in ("proxy", "hybrid"):
            res = workflow.optimize_proxy(proxy, u0, spec, cfg)
            res.to_csv(out / "history.csv")
            rows.append(_result_row(engine, "proxy", res, T))
            if engine == "hybrid":
                dataset = _load_dataset(args.dataset) if args.retrain else None
                rep = workflow.hybrid_validate(proxy, model, res.u_star, args.tol, spec, dataset,
                                               _train_cfg(args) if args.retrain else None, retrain=args.retrain)
                v = {"engine": engine, "stage": "validation", "J_est": rep.J_proxy, "J_sim": rep.J_sim,
                     "relative_error": rep.relative_error, "passed": rep.passed}
                v.update({f"p_{t + 1}": x for t, x in enumerate(rep.u_star)})
                rows.append(v)
                if rep.refined_model is not None:
                    save_model(rep.refined_model, out / "refined_model.json")
                    rows.append({"engine": engine, "stage": "refined", "J_est": rep.refined_J_proxy,
                                 "J_sim": rep.J_sim, "relative_error": rep.refined_relative_error,
                                 "passed": rep.refined_relative_error <= args.tol})
        elif engine == "proxy-assisted":
            first = workflow.optimize_proxy(proxy, u0, spec, cfg)
            rows.append(_result_row(engine, "proxy", first, T))
            res, savings = workflow.proxy_assisted(model, proxy, u0, spec, cfg, cold_start=not args.no_cold_start,
                                                   executor=_executor(args))
            res.to_csv(out / "history.csv")
            rows.append(_result_row(engine, "physics", res, T) | {"J_sim": res.J_star_est})
            (out / "savings.json").write_text(json.dumps(savings, indent=2, sort_keys=True) + "\n")
    cols = RESULT_COLS + [f"p_{t + 1}" for t in range(T)]
    workflow._write_rows(out / "result.csv", cols, rows)
    last = rows[-1]
    print(f"engine={engine} J={last.get('J_est')!r} out={out}")


def cmd_study(args):
    spec = _spec(args)
    out = _out_dir(args.out)
    cfg_model = _model_config(args)
    if args.study == "baseline":
        tab = workflow.baseline(cfg_model, spec)
    else:
        model = build_model(cfg_model)
        cfg = _opt_cfg(args)
        if args.study == "sampling":
            strategies = args.strategies.split(",")
            tab = workflow.sampling_comparison(model, strategies, args.N, spec, cfg, args.seed, _train_cfg(args),
                                               executor=_executor(args))
        else:
            if not args.model:
                raise CliError(EXIT_USAGE, "usage", f"study {args.study} needs --model")
            proxy = _load_proxy(args.model)
            if args.study == "multi-init":
                env = workflow.TrainingEnvelope.from_dataset(_load_dataset(args.dataset)) if args.dataset else None
                inits = workflow.standard_initializations(spec, model.n_control)
                tab = workflow.multi_init_study(model, proxy, inits, spec, cfg, env, physics=not args.proxy_only,
                                                executor=_executor(args))
            else:
                tab = workflow.benchmark(model, proxy, spec, cfg, repeats=args.repeats)
    path = tab.to_csv(out / f"{tab.name}.csv")
    print(f"study={tab.name} rows={len(tab.rows)} out={path}")


def cmd_report(args):
    if not Path(args.dir).is_dir():
        raise CliError(EXIT_IO, "io", f"{args.dir}: not a directory")
    sys.stdout.write(workflow.report(args.dir, args.out))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="drawdown-opt", description="Coupled-simulator and proxy drawdown optimisation.",
                epilog=__doc__.split("\n", 2)[2], formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="store_true", help="print package and file-schema versions")
    p.add_argument("--seed", type=int, default=0, help="seed for every random stream (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker cap for parallel simulator runs")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    model = _Parser(add_help=False)
    model.add_argument("--config", help="model config file (key = value lines)")
    model.add_argument("--scenario", choices=["flow_only", "low", "medium", "high"],
                       help="stress-sensitivity preset")
    model.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    cons = _Parser(add_help=False)
    d = ConstraintSpec()
    cons.add_argument("--p-min", type=float, default=d.p_min, help="lower BHP bound, Pa")
    cons.add_argument("--p-max", type=float, default=d.p_max, help="upper BHP bound, Pa")
    cons.add_argument("--dp-max", type=float, default=d.dp_max, help="largest BHP change per step, Pa")
    cons.add_argument("--monotone", action="store_true", help="require non-increasing BHP")

    opt = _Parser(add_help=False)
    o = OptimizerConfig()
    opt.add_argument("--max-iters", type=int, default=o.max_iters)
    opt.add_argument("--step-init", type=float, default=o.step_init, help="first trial step, Pa")
    opt.add_argument("--fd-step", type=float, default=o.fd_step, help="finite-difference step, Pa")
    opt.add_argument("--grad-tol", type=float, default=o.grad_tol)

    tr = _Parser(add_help=False)
    tr.add_argument("--preset", choices=["default", "study"], default="default",
                    help="base training settings; 'study' is the longer budget the studies use")
    tr.add_argument("--lr", type=float, help="learning rate (default 1e-3)")
    tr.add_argument("--batch", type=int, help="batch size (default 16, study 8)")
    tr.add_argument("--epochs", type=int, help="max epochs (default 300, study 500)")
    tr.add_argument("--patience", type=int, help="early-stop patience (default 30, study 100)")
    tr.add_argument("--l2", type=float, help="L2 weight decay (default 1e-5, study 1e-4)")
    tr.add_argument("--val-fraction", type=float, help="validation share (default 0.2)")

    s = sub.add_parser("simulate", parents=[model], help="run the simulator on one trajectory")
    s.add_argument("--trajectory", required=True, help="CSV with a bhp_pa column or a p_1..p_T row")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("gen-data", parents=[model, cons], help="sample trajectories and label them")
    s.add_argument("--strategy", default="combined", help=f"one of {', '.join(sorted(STRATEGIES))}")
    s.add_argument("-N", "--N", type=int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[tr], help="fit the proxy to a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="model JSON path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("optimize", parents=[model, cons, opt, tr], help="optimise a BHP trajectory")
    s.add_argument("engine", choices=["physics", "proxy", "hybrid", "proxy-assisted"])
    s.add_argument("--model", help="proxy JSON (proxy engines)")
    s.add_argument("--init", default="X3", help="X1..X6 or a trajectory CSV")
    s.add_argument("--tol", type=float, default=workflow.FINAL_GATE, help="hybrid validation gate")
    s.add_argument("--retrain", action="store_true", help="hybrid: retrain once if validation fails")
    s.add_argument("--dataset", help="training dataset (needed by --retrain)")
    s.add_argument("--no-cold-start", action="store_true", help="proxy-assisted: skip the cold physics run")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("study", parents=[model, cons, opt, tr], help="run a study table")
    s.add_argument("study", choices=["baseline", "multi-init", "sampling", "benchmark"])
    s.add_argument("--model", help="proxy JSON (multi-init, benchmark)")
    s.add_argument("--dataset", help="training dataset for the OOD envelope (multi-init)")
    s.add_argument("--strategies", default="linear_noise,non_increasing,piecewise,combined")
    s.add_argument("-N", "--N", type=int, default=100)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--proxy-only", action="store_true", help="multi-init: skip physics optimisation")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("report", help="summaries and figure data from study outputs")
    s.add_argument("dir")
    s.add_argument("--out", help="figure data directory (default DIR/figures)")
    s.set_defaults(func=cmd_report)
    return p


def _fail(code, kind, message):
    msg = " ".join(str(message).split())
    print(f"error code={code} kind={kind} message={msg}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.version:
            print(f"drawdown-opt {__version__}")
            for k, v in SCHEMAS.items():
                print(f"{k} {v}")
            return EXIT_OK
        if not getattr(args, "command", None):
            raise CliError(EXIT_USAGE, "usage", "a command is required (simulate, gen-data, train, optimize, "
                                                "study, report)")
        if args.threads < 1:
            raise CliError(EXIT_USAGE, "usage", "--threads must be >= 1")
        args.func(args)
        return EXIT_OK
    except CliError as err:
        return _fail(err.code, err.kind, err)
    except (ConfigError, SurrogateFormatError) as err:
        return _fail(EXIT_INPUT, "schema", err)
    except SimulationError as err:
        return _fail(EXIT_SIM, "simulation", err)
    except OptimizationError as err:
        return _fail(EXIT_OPT, "optimization", err)
    except OSError as err:
        return _fail(EXIT_IO, "io", err)
    except ValueError as err:
        return _fail(EXIT_INPUT, "input", err)
    except Exception as err:  # noqa: BLE001
        return _fail(EXIT_INTERNAL, "internal", f"{type(err).__name__}: {err}")


if __name__ == "__main__":
    sys.exit(main())
