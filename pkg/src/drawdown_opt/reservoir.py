"""Desk-scale coupled flow / geomechanics simulator.

Single-phase slightly compressible oil on a uniform 2D grid with one
vertical hydraulic fracture. Flow is solved implicitly with two-point fluxes;
geomechanics is a local uniaxial-strain closure feeding an exponential
permeability law, iterated to a fixed point inside every time step.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

DAY = 86400.0


class ConfigError(ValueError):
    """Invalid model configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class SolverError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class CouplingError(RuntimeError):
    def __init__(self, message, last_change):
        super().__init__(f"{message} (last pressure change={last_change:.3e} Pa)")
        self.last_change = last_change


class SimulationError(RuntimeError):
    """Solver or coupling failure annotated with the control step index."""

    def __init__(self, control_step, cause):
        super().__init__(f"control step {control_step}: {cause}")
        self.control_step = control_step
        self.cause = cause


class Region(enum.IntEnum):
    MATRIX = 0
    PROPPED = 1
    UNPROPPED = 2


SCENARIO_ALPHA = {
    "flow_only": 0.0,
    "low": 1e-8,
    "medium": 5e-8,
    "high": 1e-7,
}
# propped and unpropped fractures degrade faster than the matrix
PROPPED_ALPHA_FACTOR = 2.0
UNPROPPED_ALPHA_FACTOR = 4.0


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    dx: float
    dy: float
    thickness: float

    def __post_init__(self):
        for key in ("nx", "ny"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(key, "must be >= 1")
        for key in ("dx", "dy", "thickness"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be > 0")

    @property
    def n_cells(self):
        return self.nx * self.ny

    @property
    def cell_volume(self):
        return self.dx * self.dy * self.thickness

    def index(self, ix, iy):
        return ix * self.ny + iy


@dataclass(frozen=True)
class RegionProps:
    k0: float
    alpha: float
    phi: float

    def __post_init__(self):
        if not self.k0 > 0:
            raise ConfigError("k0", "must be > 0")
        if not self.alpha >= 0:
            raise ConfigError("alpha", "must be >= 0")
        if not 0 < self.phi < 1:
            raise ConfigError("phi", "must lie in (0, 1)")


@dataclass(frozen=True)
class FluidProps:
    mu: float
    ct: float
    rho_ref: float

    def __post_init__(self):
        for key in ("mu", "ct", "rho_ref"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be > 0")


@dataclass(frozen=True)
class GeomechParams:
    biot_b: float
    poisson_nu: float
    youngs_E: float

    def __post_init__(self):
        if not 0 < self.biot_b <= 1:
            raise ConfigError("biot_b", "must lie in (0, 1]")
        if not 0 <= self.poisson_nu < 0.5:
            raise ConfigError("poisson_nu", "must lie in [0, 0.5)")
        if not self.youngs_E > 0:
            raise ConfigError("youngs_E", "must be > 0")

    @property
    def eta(self):
        """Uniaxial-strain effective-stress coefficient b(1-2v)/(1-v)."""
        return self.biot_b * (1.0 - 2.0 * self.poisson_nu) / (1.0 - self.poisson_nu)


@dataclass(frozen=True)
class WellSpec:
    cell_index: int
    well_index: float  # geometric factor WI (m); rate = WI * k / mu * (p_cell - bhp)
    rate_clamp_nonnegative: bool = True


@dataclass
class ReservoirState:
    pressure: np.ndarray
    dsigma_eff: np.ndarray
    k_current: np.ndarray
    time: float = 0.0
    cumulative_oil: float = 0.0

    def copy(self):
        return ReservoirState(
            self.pressure.copy(), self.dsigma_eff.copy(), self.k_current.copy(),
            self.time, self.cumulative_oil,
        )


@dataclass
class SimulationResult:
    cumulative_per_control_step: np.ndarray
    rate_series: np.ndarray
    final_state: ReservoirState
    mass_balance_error: float
    coupling_iterations: np.ndarray  # per substep
    bhp: np.ndarray
    step_end_times: np.ndarray  # s
    substeps_per_control: int

    @property
    def J(self):
        """Cumulative oil at the end of the horizon (m^3)."""
        return float(self.cumulative_per_control_step[-1])

    @property
    def step_oil(self):
        return np.diff(self.cumulative_per_control_step, prepend=0.0)

    def iterations_per_control_step(self):
        return self.coupling_iterations.reshape(-1, self.substeps_per_control).sum(axis=1)

    def to_csv(self, path):
        """Columns: step, time_days, bhp_pa, step_oil_m3, cum_oil_m3, coupling_iters."""
        iters = self.iterations_per_control_step()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "time_days", "bhp_pa", "step_oil_m3", "cum_oil_m3", "coupling_iters"])
            for i in range(len(self.bhp)):
                w.writerow([
                    i + 1, repr(float(self.step_end_times[i] / DAY)), repr(float(self.bhp[i])),
                    repr(float(self.step_oil[i])), repr(float(self.cumulative_per_control_step[i])),
                    int(iters[i]),
                ])


@dataclass
class ModelConfig:
    """Flat key/value model description; every field is a config-file key."""

    nx: int = 41
    ny: int = 21
    dx: float = 10.0
    dy: float = 10.0
    thickness: float = 10.0
    fracture_ix: int = -1  # -1: centre column
    halo_width: int = 1
    well_ix: int = -1  # -1: on the fracture column
    well_iy: int = -1  # -1: centre row
    p_init: float = 40e6
    phi_matrix: float = 0.08
    phi_propped: float = 0.30
    phi_unpropped: float = 0.30
    k0_matrix: float = 1e-18
    k0_propped: float = 1e-13
    k0_unpropped: float = 1e-15
    alpha_matrix: float = SCENARIO_ALPHA["medium"]
    alpha_propped: float = PROPPED_ALPHA_FACTOR * SCENARIO_ALPHA["medium"]
    alpha_unpropped: float = UNPROPPED_ALPHA_FACTOR * SCENARIO_ALPHA["medium"]
    mu: float = 1e-3
    ct: float = 1e-9
    rho_ref: float = 850.0
    biot_b: float = 0.8
    poisson_nu: float = 0.25
    youngs_E: float = 10e9
    well_radius: float = 0.1
    well_index: float = 0.0  # <= 0: Peaceman estimate
    rate_clamp: bool = True
    horizon_days: float = 3600.0
    n_control: int = 20
    step_ratio: float = 1.25
    substeps: int = 5
    p_floor: float = 1e5
    p_ceiling: float = 1e8
    coupling_tol: float = 100.0
    coupling_max_iter: int = 50
    solver_tol: float = 1e-10
    mass_balance_tol: float = 1e-6

    def with_scenario(self, name):
        base = SCENARIO_ALPHA[name]
        return dataclasses.replace(
            self,
            alpha_matrix=base,
            alpha_propped=PROPPED_ALPHA_FACTOR * base,
            alpha_unpropped=UNPROPPED_ALPHA_FACTOR * base,
        )

    def fingerprint(self):
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(key, raw, typ):
    try:
        if typ is bool:
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(str(raw).strip())
        return float(str(raw).strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text, base: ModelConfig | None = None):
    """Parse ``key = value`` lines (``#`` comments) into a :class:`ModelConfig`.

    Keys not given keep their value from ``base`` (defaults if None). The
    optional ``scenario`` key (flow_only/low/medium/high) sets all region
    alphas; explicit ``alpha_*`` keys override it.
    """
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    type_map = {"int": int, "float": float, "bool": bool}
    values = {}
    scenario = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "scenario":
            if raw not in SCENARIO_ALPHA:
                raise ConfigError(key, f"unknown scenario {raw!r}")
            scenario = raw
            continue
        if key not in types:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, raw, type_map[types[key]])
    cfg = ModelConfig() if base is None else base
    if scenario is not None:
        cfg = cfg.with_scenario(scenario)
    return dataclasses.replace(cfg, **values)


def load_config(path):
    return parse_config(Path(path).read_text())


def dump_config(cfg):
    lines = [f"{f.name} = {getattr(cfg, f.name)!r}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def control_step_lengths(horizon, n, ratio):
    """Geometric control-step lengths summing to ``horizon``."""
    w = ratio ** np.arange(n)
    return horizon * w / w.sum()


@dataclass
class ReservoirModel:
    config: ModelConfig
    grid: Grid
    regions: np.ndarray
    region_props: dict
    fluid: FluidProps
    geomech: GeomechParams
    well: WellSpec
    p_init: float
    control_step_ends: np.ndarray  # s
    k0_cells: np.ndarray = field(init=False, repr=False)
    alpha_cells: np.ndarray = field(init=False, repr=False)
    phi_cells: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        props = [self.region_props[Region(r)] for r in range(3)]
        self.k0_cells = np.array([props[r].k0 for r in self.regions])
        self.alpha_cells = np.array([props[r].alpha for r in self.regions])
        self.phi_cells = np.array([props[r].phi for r in self.regions])

    @property
    def n_control(self):
        return len(self.control_step_ends)

    @property
    def pore_compressibility_volume(self):
        """phi * ct * V per cell (m^3 / Pa)."""
        return self.phi_cells * self.fluid.ct * self.grid.cell_volume

    def initial_state(self):
        n = self.grid.n_cells
        return ReservoirState(
            pressure=np.full(n, self.p_init),
            dsigma_eff=np.zeros(n),
            k_current=self.k0_cells.copy(),
        )

    def fingerprint(self):
        return self.config.fingerprint()


def region_map(grid, fracture_ix, halo_width):
    """Label cells: fracture column propped, ``halo_width`` columns each side unpropped."""
    ix = np.repeat(np.arange(grid.nx), grid.ny)
    dist = np.abs(ix - fracture_ix)
    regions = np.full(grid.n_cells, int(Region.MATRIX))
    regions[(dist >= 1) & (dist <= halo_width)] = int(Region.UNPROPPED)
    regions[dist == 0] = int(Region.PROPPED)
    return regions


def peaceman_well_index(dx, dy, thickness, rw):
    r_eq = 0.14 * math.hypot(dx, dy)
    return 2.0 * math.pi * thickness / math.log(r_eq / rw)


def build_model(config: ModelConfig) -> ReservoirModel:
    c = config
    grid = Grid(int(c.nx), int(c.ny), float(c.dx), float(c.dy), float(c.thickness))
    frac_ix = grid.nx // 2 if c.fracture_ix < 0 else int(c.fracture_ix)
    if not 0 <= frac_ix < grid.nx:
        raise ConfigError("fracture_ix", "outside grid")
    if c.halo_width < 0:
        raise ConfigError("halo_width", "must be >= 0")
    well_ix = frac_ix if c.well_ix < 0 else int(c.well_ix)
    well_iy = grid.ny // 2 if c.well_iy < 0 else int(c.well_iy)
    if not 0 <= well_ix < grid.nx:
        raise ConfigError("well_ix", "outside grid")
    if not 0 <= well_iy < grid.ny:
        raise ConfigError("well_iy", "outside grid")
    regions = region_map(grid, frac_ix, int(c.halo_width))
    well_cell = grid.index(well_ix, well_iy)
    if regions[well_cell] != Region.PROPPED:
        raise ConfigError("well_ix", "well cell must lie in the propped fracture")

    def props(region, name):
        try:
            return RegionProps(getattr(c, f"k0_{name}"), getattr(c, f"alpha_{name}"), getattr(c, f"phi_{name}"))
        except ConfigError as err:
            raise ConfigError(f"{err.key}_{name}", str(err).split(": ", 1)[1]) from None

    region_props = {
        Region.MATRIX: props(Region.MATRIX, "matrix"),
        Region.PROPPED: props(Region.PROPPED, "propped"),
        Region.UNPROPPED: props(Region.UNPROPPED, "unpropped"),
    }
    fluid = FluidProps(c.mu, c.ct, c.rho_ref)
    geomech = GeomechParams(c.biot_b, c.poisson_nu, c.youngs_E)
    if c.well_index > 0:
        wi = float(c.well_index)
    else:
        if not 0 < c.well_radius < 0.14 * math.hypot(grid.dx, grid.dy):
            raise ConfigError("well_radius", "must be positive and smaller than the equivalent radius")
        wi = peaceman_well_index(grid.dx, grid.dy, grid.thickness, c.well_radius)
    well = WellSpec(well_cell, wi, bool(c.rate_clamp))
    if not c.p_floor < c.p_init < c.p_ceiling:
        raise ConfigError("p_init", "must lie strictly between p_floor and p_ceiling")
    if c.n_control < 1:
        raise ConfigError("n_control", "must be >= 1")
    if c.substeps < 1:
        raise ConfigError("substeps", "must be >= 1")
    if not c.horizon_days > 0:
        raise ConfigError("horizon_days", "must be > 0")
    if not c.step_ratio > 0:
        raise ConfigError("step_ratio", "must be > 0")
    if not c.coupling_tol > 0:
        raise ConfigError("coupling_tol", "must be > 0")
    if c.coupling_max_iter < 1:
        raise ConfigError("coupling_max_iter", "must be >= 1")
    ends = np.cumsum(control_step_lengths(c.horizon_days * DAY, int(c.n_control), c.step_ratio))
    return ReservoirModel(c, grid, regions, region_props, fluid, geomech, well, float(c.p_init), ends)


def update_permeability(k0, alpha, dsigma_eff):
    """k = k0 * exp(-alpha * dsigma_eff)."""
    return k0 * np.exp(-alpha * dsigma_eff)


def effective_stress_update(pressure, p_init, eta):
    """Uniaxial-strain closure: dsigma_eff = eta * (p_init - p)."""
    return eta * (p_init - np.asarray(pressure, dtype=float))


def _net_outflow(p, tx, ty, nx, ny):
    """Two-point flux divergence built from pressure differences (exactly 0 for uniform p)."""
    P = p.reshape(nx, ny)
    out = np.zeros_like(P)
    fx = tx * (P[:-1] - P[1:])
    out[:-1] += fx
    out[1:] -= fx
    fy = ty * (P[:, :-1] - P[:, 1:])
    out[:, :-1] += fy
    out[:, 1:] -= fy
    return out.ravel()


def _solve(model, p_old, acc, tx, ty, well_coef, bhp):
    # increment form: (acc + T + W) dp = -(T p_old) - W (p_old - bhp)
    g = model.grid
    w = model.well.cell_index
    ab = kernels.assemble_band(acc, tx, ty, g.nx, g.ny, w, well_coef)
    b = -_net_outflow(p_old, tx, ty, g.nx, g.ny)
    b[w] -= well_coef * (p_old[w] - bhp)
    dp, err = kernels.solve_band(ab, b)
    if not np.all(np.isfinite(dp)) or err > model.config.solver_tol:
        raise SolverError("pressure solve failed", err if np.isfinite(err) else np.inf)
    return p_old + dp


def step_flow(state, dt, bhp, k_field, model):
    """One backward-Euler pressure step with permeability held at ``k_field``.

    Returns the new state (pressure, time, cumulative updated; k_current set
    to ``k_field``; dsigma_eff carried over) and the produced volume (m^3).
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    cfg = model.config
    if not cfg.p_floor <= bhp <= cfg.p_ceiling:
        raise ValueError(f"bhp {bhp} outside [{cfg.p_floor}, {cfg.p_ceiling}]")
    g = model.grid
    w = model.well.cell_index
    acc = model.pore_compressibility_volume / dt
    tx, ty = kernels.harmonic_transmissibility(k_field, g.nx, g.ny, g.dx, g.dy, g.thickness, model.fluid.mu)
    well_coef = model.well.well_index * k_field[w] / model.fluid.mu
    p = _solve(model, state.pressure, acc, tx, ty, well_coef, bhp)
    if model.well.rate_clamp_nonnegative and p[w] < bhp:
        # the well would inject: shut it for this step
        well_coef = 0.0
        p = _solve(model, state.pressure, acc, tx, ty, 0.0, bhp)
    if np.min(p) < cfg.p_floor:
        raise SolverError("pressure fell below p_floor", float(cfg.p_floor - np.min(p)))
    rate = well_coef * (p[w] - bhp)
    produced = rate * dt
    new = ReservoirState(p, state.dsigma_eff.copy(), np.array(k_field, dtype=float), state.time + dt,
                         state.cumulative_oil + produced)
    return new, produced


def coupled_step(state, dt, bhp, model, tol=None, max_iter=None):
    """Sequential iterative coupling: flow -> stress -> permeability -> flow.

    Every pass restarts from ``state``; stops once successive end-of-step
    pressures differ by less than ``tol`` (Pa) in every cell. The permeability
    exponent handed to the next pass is Aitken-relaxed, which keeps the
    fixed point stable for strongly stress-sensitive fractures.
    Returns ``(new_state, produced, iterations)``.
    """
    tol = model.config.coupling_tol if tol is None else tol
    max_iter = model.config.coupling_max_iter if max_iter is None else max_iter
    if not tol > 0:
        raise ValueError("tol must be > 0")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    eta = model.geomech.eta
    k0, alpha = model.k0_cells, model.alpha_cells
    k_iter = state.k_current
    expo = np.log(k_iter / k0)  # -alpha * dsigma carried by k_iter
    resid_prev = None
    omega = 1.0
    p_prev = None
    change = math.inf
    for it in range(1, max_iter + 1):
        trial, produced = step_flow(state, dt, bhp, k_iter, model)
        dsigma = effective_stress_update(trial.pressure, model.p_init, eta)
        k_next = update_permeability(k0, alpha, dsigma)
        if p_prev is not None:
            change = float(np.max(np.abs(trial.pressure - p_prev)))
        elif np.array_equal(k_next, k_iter):
            # next pass would repeat this solve bit for bit
            change = 0.0
            it += 1
        if change < tol:
            trial.dsigma_eff = dsigma
            trial.k_current = k_next
            return trial, produced, it
        p_prev = trial.pressure
        resid = -alpha * dsigma - expo
        if resid_prev is not None:
            dr = resid - resid_prev
            denom = float(np.dot(dr, dr))
            if denom > 0:
                omega = min(max(-omega * float(np.dot(resid_prev, dr)) / denom, 0.05), 1.5)
        resid_prev = resid
        expo = expo + omega * resid
        k_iter = k0 * np.exp(expo)
    raise CouplingError(f"coupling did not converge in {max_iter} iterations", change)


def control_values(trajectory):
    return np.asarray(getattr(trajectory, "values", trajectory), dtype=float)


def simulate(model, trajectory, substeps_per_control=None):
    """Run the coupled model through every control interval; J = final cumulative oil."""
    u = control_values(trajectory)
    substeps = model.config.substeps if substeps_per_control is None else int(substeps_per_control)
    if substeps < 1:
        raise ValueError("substeps_per_control must be >= 1")
    if u.shape != (model.n_control,):
        raise ValueError(f"trajectory length {u.shape} != {model.n_control} control steps")
    if not np.all(np.isfinite(u)):
        raise ValueError("trajectory contains non-finite values")
    cfg = model.config
    if np.any(u < cfg.p_floor) or np.any(u > cfg.p_ceiling):
        raise ValueError("trajectory outside absolute pressure limits")

    state = model.initial_state()
    starts = np.concatenate([[0.0], model.control_step_ends[:-1]])
    cumulative = np.empty(model.n_control)
    rates = np.empty(model.n_control * substeps)
    iters = np.empty(model.n_control * substeps, dtype=int)
    for c, (t0, t1) in enumerate(zip(starts, model.control_step_ends)):
        dt = (t1 - t0) / substeps
        for s in range(substeps):
            try:
                state, produced, it = coupled_step(state, dt, u[c], model)
            except (SolverError, CouplingError) as err:
                raise SimulationError(c, err) from err
            rates[c * substeps + s] = produced / dt
            iters[c * substeps + s] = it
        cumulative[c] = state.cumulative_oil

    depleted = float(np.dot(model.pore_compressibility_volume, model.p_init - state.pressure))
    produced_total = state.cumulative_oil
    if produced_total > 0:
        mb = abs(produced_total - depleted) / produced_total
    else:
        mb = abs(depleted) / max(float(np.sum(model.pore_compressibility_volume)) * model.p_init, 1e-300)
    return SimulationResult(cumulative, rates, state, mb, iters, u.copy(), model.control_step_ends.copy(), substeps)


def baseline_study(model_presets, trajectory):
    """Cumulative production per control step for each named model.

    Returns ``{name: cumulative_per_control_step}`` in input order.
    """
    return {name: simulate(model, trajectory).cumulative_per_control_step for name, model in model_presets.items()}


def scenario_models(base: ModelConfig | None = None, names=("flow_only", "low", "medium", "high")):
    base = ModelConfig() if base is None else base
    return {name: build_model(base.with_scenario(name)) for name in names}
