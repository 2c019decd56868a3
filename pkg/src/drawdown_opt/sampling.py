"""BHP trajectory generators, feasibility projection and labelled datasets."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .reservoir import DAY, control_step_lengths, simulate

FEAS_TOL = 1e-9  # Pa


@dataclass(frozen=True)
class ConstraintSpec:
    p_min: float = 10e6
    p_max: float = 38e6
    dp_max: float = 3e6
    monotone: bool = False

    def __post_init__(self):
        if not self.p_min < self.p_max:
            raise ValueError("p_min must be < p_max")
        if not self.dp_max > 0:
            raise ValueError("dp_max must be > 0")

    @property
    def range(self):
        return self.p_max - self.p_min

    def violation(self, values):
        """Largest constraint violation (Pa); <= 0 means feasible."""
        u = np.asarray(values, dtype=float)
        worst = max(float(np.max(self.p_min - u)), float(np.max(u - self.p_max)))
        if u.size > 1:
            du = np.diff(u)
            worst = max(worst, float(np.max(np.abs(du))) - self.dp_max)
            if self.monotone:
                worst = max(worst, float(np.max(du)))
        return worst

    def is_feasible(self, values, tol=FEAS_TOL):
        return self.violation(values) <= tol


def default_step_end_times(T, horizon_days=3600.0, ratio=1.25):
    return np.cumsum(control_step_lengths(horizon_days, T, ratio))


@dataclass
class ControlTrajectory:
    values: np.ndarray  # Pa
    step_end_times: np.ndarray = None  # days

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.step_end_times is None:
            self.step_end_times = default_step_end_times(len(self.values))
        self.step_end_times = np.asarray(self.step_end_times, dtype=float)
        if self.values.ndim != 1 or self.values.shape != self.step_end_times.shape:
            raise ValueError("values and step_end_times must be 1-D of equal length")
        if np.any(np.diff(self.step_end_times) <= 0):
            raise ValueError("step_end_times must be strictly increasing")

    def __len__(self):
        return len(self.values)

    @classmethod
    def for_model(cls, model, values):
        return cls(values, model.control_step_ends / DAY)


def project_feasible(values, spec: ConstraintSpec, max_iter=500):
    """Euclidean projection onto box, step-change band and optional monotone cone."""
    u = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("cannot project non-finite values")
    if u.size == 0:
        return u.copy()
    x, _ = kernels.dykstra_project(u, spec.p_min, spec.p_max, spec.dp_max, spec.monotone,
                                   max_iter=max_iter, tol=1e-13 * spec.range)
    return x


def _rng(seed):
    return np.random.default_rng(seed)


def _noise_sd(spec, noise_sd):
    return 0.02 * spec.range if noise_sd is None else float(noise_sd)


def _traj(values, times):
    return ControlTrajectory(values, times)


def gen_linear_decline_noise(spec, T, noise_sd=None, rng_seed=None, *, start=None, end=None, times=None):
    """Random linear ramp (end <= start) plus white noise, projected to feasibility."""
    rng = _rng(rng_seed)
    p_s = rng.uniform(spec.p_min, spec.p_max) if start is None else start
    p_e = rng.uniform(spec.p_min, p_s) if end is None else end
    sd = _noise_sd(spec, noise_sd)
    if sd < 0:
        raise ValueError("noise_sd must be >= 0")
    u = np.linspace(p_s, p_e, T) + rng.normal(0.0, 1.0, T) * sd
    return _traj(project_feasible(u, spec), times)


def gen_moving_uniform(spec, T, window, rng_seed=None, *, times=None):
    """Bounded random walk: each step uniform within +-min(window, dp_max)."""
    if not window > 0:
        raise ValueError("window must be > 0")
    rng = _rng(rng_seed)
    w = min(window, spec.dp_max)
    u = np.empty(T)
    u[0] = rng.uniform(spec.p_min, spec.p_max)
    for t in range(1, T):
        lo = max(spec.p_min, u[t - 1] - w)
        hi = min(spec.p_max, u[t - 1] + w)
        if spec.monotone:
            hi = u[t - 1]
        u[t] = rng.uniform(lo, hi)
    return _traj(u, times)


def _piecewise(T, knots_t, knots_p):
    return np.interp(np.arange(T), knots_t, knots_p)


def gen_variable_decline_noise(spec, T, rng_seed=None, noise_sd=None, *, breakpoint=None, start=None,
                               mid=None, end=None, times=None):
    """Two-slope decline with a random breakpoint, noise, then projection.

    ``breakpoint`` is the 0-based index of the kink, drawn from steps 3..T-3.
    """
    rng = _rng(rng_seed)
    if breakpoint is None:
        lo, hi = 2, max(T - 3, 2)
        breakpoint = int(rng.integers(lo, hi + 1)) if T > 2 else T - 1
    p_s = rng.uniform(spec.p_min, spec.p_max) if start is None else start
    p_b = rng.uniform(spec.p_min, p_s) if mid is None else mid
    p_e = rng.uniform(spec.p_min, p_b) if end is None else end
    if T == 1:
        u = np.array([p_s])
    else:
        breakpoint = min(max(int(breakpoint), 0), T - 1)
        u = _piecewise(T, [0, breakpoint, T - 1], [p_s, p_b, p_e])
    u = u + rng.normal(0.0, 1.0, T) * _noise_sd(spec, noise_sd)
    return _traj(project_feasible(u, spec), times)


def gen_linear_decline(spec, T, rng_seed=None, *, start=None, end=None, times=None):
    """Noise-free linear ramp from a random start to a random lower end."""
    rng = _rng(rng_seed)
    p_s = rng.uniform(spec.p_min, spec.p_max) if start is None else start
    p_e = rng.uniform(spec.p_min, p_s) if end is None else end
    u = np.linspace(p_s, p_e, T)
    return _traj(project_feasible(u, spec), times)


def _segment_run(rng, spec, T, p0, n_seg, kinds):
    """Non-increasing run of segments; kinds[i] is 'hold' or 'decline'."""
    cuts = np.sort(rng.choice(np.arange(1, T), size=n_seg - 1, replace=False)) if n_seg > 1 else np.array([], int)
    bounds = np.concatenate([[0], cuts, [T]])
    u = np.empty(T)
    level = p0
    for seg, kind in enumerate(kinds):
        a, b = bounds[seg], bounds[seg + 1]
        if kind == "hold":
            u[a:b] = level
            continue
        rate = rng.uniform(0.0, spec.dp_max)
        for t in range(a, b):
            level = max(spec.p_min, level - rate) if t > 0 else level
            u[t] = level
    return u


def gen_constant_or_decline(spec, T, rng_seed=None, *, times=None):
    """2-4 segments, each either held constant or declining at a random feasible rate."""
    rng = _rng(rng_seed)
    n_seg = min(int(rng.integers(2, 5)), T)
    kinds = ["hold" if rng.random() < 0.5 else "decline" for _ in range(n_seg)]
    p0 = rng.uniform(spec.p_min, spec.p_max)
    u = _segment_run(rng, spec, T, p0, n_seg, kinds)
    return _traj(project_feasible(u, spec), times)


def gen_decline_hold_decline(spec, T, rng_seed=None, *, times=None):
    """Concatenated class of the combined strategy: decline, hold, decline."""
    rng = _rng(rng_seed)
    n_seg = min(3, T)
    p0 = rng.uniform(spec.p_min, spec.p_max)
    u = _segment_run(rng, spec, T, p0, n_seg, ["decline", "hold", "decline"][:n_seg])
    return _traj(project_feasible(u, spec), times)


COMBINED_CLASSES = ("linear_decline", "constant_or_decline", "decline_hold_decline")


def gen_combined(spec, T, rng_seed=None, probs=(1 / 3, 1 / 3, 1 / 3), *, times=None):
    """Draw one of the three smooth classes with ``probs``.

    The class draw uses a stream spawned from the seed, and the trajectory uses
    the seed itself, so a degenerate mixture reproduces that class's generator.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (3,) or np.any(probs < 0) or probs.sum() <= 0:
        raise ValueError("probs must be three non-negative weights")
    chooser = np.random.default_rng(np.random.SeedSequence(rng_seed).spawn(1)[0])
    cls = COMBINED_CLASSES[int(chooser.choice(3, p=probs / probs.sum()))]
    return GENERATORS[cls](spec, T, rng_seed, times=times)


def _moving_uniform_default(spec, T, rng_seed=None, *, times=None):
    return gen_moving_uniform(spec, T, spec.dp_max, rng_seed, times=times)


GENERATORS = {
    "linear_noise": lambda spec, T, rng_seed=None, times=None: gen_linear_decline_noise(
        spec, T, None, rng_seed, times=times),
    "moving_uniform": _moving_uniform_default,
    "variable_decline_noise": lambda spec, T, rng_seed=None, times=None: gen_variable_decline_noise(
        spec, T, rng_seed, times=times),
    "linear_decline": gen_linear_decline,
    "constant_or_decline": gen_constant_or_decline,
    "decline_hold_decline": gen_decline_hold_decline,
    "combined": gen_combined,
}

# named strategies -> stratified class weights
STRATEGIES = {
    "combined": {c: 1.0 for c in COMBINED_CLASSES},
    "linear_noise": {"linear_noise": 1.0},
    "moving_uniform": {"moving_uniform": 1.0},
    "variable_decline_noise": {"variable_decline_noise": 1.0},
    "non_increasing": {"constant_or_decline": 1.0},
    "piecewise": {"variable_decline_noise": 1.0},
    "linear_decline": {"linear_decline": 1.0},
    "constant_or_decline": {"constant_or_decline": 1.0},
}


def allocate(mix, N):
    """Stratified class counts: floor(N * w) per class, remainder to the last."""
    names = list(mix)
    w = np.array([mix[n] for n in names], dtype=float)
    counts = np.floor(N * w / w.sum()).astype(int)
    counts[-1] += N - counts.sum()
    return dict(zip(names, counts.tolist()))


@dataclass
class Sample:
    trajectory: ControlTrajectory
    J: float
    tag: str


@dataclass
class Dataset:
    samples: list
    constraint_spec: ConstraintSpec
    model_fingerprint: str
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def U(self):
        return np.array([s.trajectory.values for s in self.samples])

    @property
    def J(self):
        return np.array([s.J for s in self.samples])

    @property
    def tags(self):
        return [s.tag for s in self.samples]

    def append(self, trajectory, J, tag):
        self.samples.append(Sample(trajectory, float(J), tag))

    def subset(self, idx):
        return Dataset([self.samples[i] for i in idx], self.constraint_spec, self.model_fingerprint, self.seed,
                       dict(self.meta))

    def to_csv(self, path):
        """Write ``tag, p_1..p_T, J_m3`` plus a ``<path>.meta.json`` sidecar."""
        path = Path(path)
        T = len(self.samples[0].trajectory) if self.samples else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tag"] + [f"p_{t + 1}" for t in range(T)] + ["J_m3"])
            for s in self.samples:
                w.writerow([s.tag] + [repr(float(v)) for v in s.trajectory.values] + [repr(float(s.J))])
        meta = {
            "schema": "dataset/1",
            "constraint_spec": asdict(self.constraint_spec),
            "seed": self.seed,
            "model_fingerprint": self.model_fingerprint,
            "step_end_times_days": [float(t) for t in self.samples[0].trajectory.step_end_times] if self.samples
            else [],
            **self.meta,
        }
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        spec = ConstraintSpec(**meta["constraint_spec"]) if "constraint_spec" in meta else ConstraintSpec()
        times = meta.get("step_end_times_days") or None
        samples = []
        with open(path, newline="") as fh:
            rows = csv.reader(fh)
            header = next(rows)
            if header[0] != "tag" or header[-1] != "J_m3":
                raise ValueError(f"{path}: unexpected header {header[:2]}...{header[-1:]}")
            for lineno, row in enumerate(rows, 2):
                if len(row) != len(header):
                    raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                try:
                    vals = [float(v) for v in row[1:-1]]
                    J = float(row[-1])
                except ValueError as err:
                    raise ValueError(f"{path}:{lineno}: {err}") from None
                samples.append(Sample(ControlTrajectory(vals, times), J, row[0]))
        extra = {k: v for k, v in meta.items()
                 if k not in ("constraint_spec", "seed", "model_fingerprint", "step_end_times_days", "schema")}
        return cls(samples, spec, meta.get("model_fingerprint", ""), meta.get("seed"), extra)


def sample_trajectories(strategy, spec, T, N, seed, times=None):
    """``N`` trajectories for a named strategy or ``{class: weight}`` mix.

    Classes are allocated stratified, then the order is shuffled with a stream
    derived from ``seed``; sample ``i`` gets its own child seed.
    """
    mix = STRATEGIES[strategy] if isinstance(strategy, str) else dict(strategy)
    counts = allocate(mix, N)
    tags = [name for name, n in counts.items() for _ in range(n)]
    ss = np.random.SeedSequence(seed)
    order_ss, sample_ss = ss.spawn(2)
    tags = [tags[i] for i in np.random.default_rng(order_ss).permutation(N)]
    seeds = sample_ss.generate_state(N, dtype=np.uint64)
    out = []
    for tag, s in zip(tags, seeds):
        traj = GENERATORS[tag](spec, T, int(s), times=times)
        out.append((traj, tag))
    return out


def build_dataset(model, generator_mix, N, rng_seed, spec=None, executor=None):
    """Sample ``N`` feasible trajectories and label each with the simulator.

    ``executor`` (a thread pool; the labeller is a closure) may label in parallel;
    assembly order is always by sample index.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    spec = ConstraintSpec() if spec is None else spec
    T = model.n_control
    times = model.control_step_ends / DAY
    drawn = sample_trajectories(generator_mix, spec, T, N, rng_seed, times)
    for i, (traj, _) in enumerate(drawn):
        if not spec.is_feasible(traj.values):
            raise AssertionError(f"sample {i}: generator produced an infeasible trajectory")

    def label(i):
        try:
            return simulate(model, drawn[i][0]).J
        except Exception as err:
            raise RuntimeError(f"sample {i}: {err}") from err

    if executor is None:
        Js = [label(i) for i in range(N)]
    else:
        Js = list(executor.map(label, range(N)))
    samples = [Sample(traj, J, tag) for (traj, tag), J in zip(drawn, Js)]
    name = generator_mix if isinstance(generator_mix, str) else "custom"
    return Dataset(samples, spec, model.fingerprint(), rng_seed, {"strategy": name})
