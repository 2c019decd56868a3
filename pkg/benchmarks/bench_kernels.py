"""Numba vs pure numpy/scipy kernel timings.

The kernel path is fixed at import time by DRAWDOWN_OPT_NUMBA, so each path
runs in its own subprocess. The parent compares timings and checks that both
paths give the same answers.

    python benchmarks/bench_kernels.py [--repeats 5] [--csv out.csv]
"""
import argparse
import csv
import json
import os
import subprocess
import sys
from timeit import default_timer as timer

import numpy as np


def _best(fn, repeats):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeats):
        t0 = timer()
        fn()
        times.append(timer() - t0)
    return min(times)


def worker(repeats):
    from drawdown_opt import _accel, kernels
    from drawdown_opt.reservoir import ModelConfig, build_model, simulate
    from drawdown_opt.sampling import ConstraintSpec, project_feasible

    model = build_model(ModelConfig())
    g = model.grid
    rng = np.random.default_rng(0)
    k = model.k0_cells * np.exp(-rng.uniform(0, 0.5, g.n_cells))
    tx, ty = kernels.harmonic_transmissibility(k, g.nx, g.ny, g.dx, g.dy, g.thickness, model.fluid.mu)
    acc = model.pore_compressibility_volume / 86400.0
    ab = kernels.assemble_band(acc, tx, ty, g.nx, g.ny, model.well.cell_index, 1e-12)
    b = acc * 4e7
    spec = ConstraintSpec()
    raw = rng.uniform(5e6, 45e6, model.n_control)
    u = np.linspace(38e6, 10e6, model.n_control)

    out = {"numba": _accel.USE_NUMBA}
    out["solve_s"] = _best(lambda: kernels.solve_band(ab, b), repeats * 20)
    out["project_s"] = _best(lambda: project_feasible(raw, spec), repeats * 20)
    out["simulate_s"] = _best(lambda: simulate(model, u), repeats)
    out["solve_x"] = kernels.solve_band(ab, b)[0].tolist()
    out["project_x"] = project_feasible(raw, spec).tolist()
    out["J"] = simulate(model, u).J
    print(json.dumps(out))


def run_path(numba_on, repeats):
    env = dict(os.environ, DRAWDOWN_OPT_NUMBA="1" if numba_on else "0")
    res = subprocess.run([sys.executable, __file__, "--worker", "--repeats", str(repeats)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--csv", help="write the timing table here")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.worker:
        worker(args.repeats)
        return 0

    nb = run_path(True, args.repeats)
    py = run_path(False, args.repeats)
    rows = []
    for key, label in [("solve_s", "banded solve"), ("project_s", "projection"), ("simulate_s", "simulate")]:
        rows.append((label, py[key], nb[key], py[key] / nb[key]))
    print(f"{'kernel':<14}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>9}")
    for label, a, b, r in rows:
        print(f"{label:<14}{a:>12.3e}{b:>12.3e}{r:>9.2f}")

    dx = np.max(np.abs(np.array(nb["solve_x"]) - py["solve_x"])) / np.max(np.abs(py["solve_x"]))
    dp = np.max(np.abs(np.array(nb["project_x"]) - py["project_x"]))
    dJ = abs(nb["J"] - py["J"]) / abs(py["J"])
    print(f"agreement: solve {dx:.1e} rel, projection {dp:.1e} Pa, J {dJ:.1e} rel")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kernel", "numpy_s", "numba_s", "speedup"])
            w.writerows(rows)
    return 0 if dx < 1e-8 and dp < 1e-6 and dJ < 1e-8 else 1


if __name__ == "__main__":
    sys.exit(main())
