import numpy as np
import pytest

from drawdown_opt import sampling
from drawdown_opt.sampling import (
    ConstraintSpec, ControlTrajectory, Dataset, allocate, build_dataset, gen_combined, gen_constant_or_decline,
    gen_linear_decline, gen_linear_decline_noise, gen_moving_uniform, gen_variable_decline_noise,
    project_feasible, sample_trajectories,
)
from oracles import qp_project

SPEC = ConstraintSpec()
MONO = ConstraintSpec(monotone=True)
T = 20


def test_constraint_spec_validation():
    with pytest.raises(ValueError):
        ConstraintSpec(p_min=40e6, p_max=38e6)
    with pytest.raises(ValueError):
        ConstraintSpec(dp_max=0.0)
    assert SPEC.range == 28e6


def test_violation_measure():
    assert SPEC.violation([10e6, 13e6, 13e6]) == pytest.approx(-0.0, abs=1e-9)
    assert SPEC.violation([10e6, 14e6]) == pytest.approx(1e6)
    assert SPEC.violation([39e6]) == pytest.approx(1e6)
    assert MONO.violation([20e6, 21e6]) == pytest.approx(1e6)


def test_trajectory_type_checks():
    tr = ControlTrajectory(np.full(T, 30e6))
    assert tr.step_end_times[-1] == pytest.approx(3600.0)
    assert np.all(np.diff(tr.step_end_times) > 0)
    with pytest.raises(ValueError):
        ControlTrajectory(np.ones(3), np.array([1.0, 1.0, 2.0]))
    with pytest.raises(ValueError):
        ControlTrajectory(np.ones(3), np.array([1.0, 2.0]))


# projection

def test_project_feasible_unchanged_and_box():
    u = np.linspace(38e6, 20e6, T)
    assert np.array_equal(project_feasible(u, SPEC), u)
    assert project_feasible([45e6], SPEC)[0] == 38e6
    with pytest.raises(ValueError):
        project_feasible([np.nan, 1.0], SPEC)


def test_projection_matches_qp_on_100_instances():
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        spec = MONO if i % 2 else SPEC
        x0 = rng.uniform(0.0, 50e6, 5)
        got = project_feasible(x0, spec)
        ref = qp_project(x0, spec.p_min, spec.p_max, spec.dp_max, spec.monotone)
        worst = max(worst, float(np.linalg.norm(got - ref)))
    assert worst < 1e-5 * SPEC.range


def test_projection_non_expansive_towards_feasible_points():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x0 = rng.uniform(0.0, 50e6, 8)
        y = gen_moving_uniform(SPEC, 8, 3e6, int(rng.integers(1 << 30))).values
        x = project_feasible(x0, SPEC)
        assert np.linalg.norm(x - y) <= np.linalg.norm(x0 - y) + 1e-6


# generators

def test_linear_noise_zero_noise_ramp():
    tr = gen_linear_decline_noise(SPEC, T, noise_sd=0.0, rng_seed=1, start=38e6, end=10e6)
    assert np.allclose(tr.values, np.linspace(38e6, 10e6, T), rtol=0, atol=1e-6)


def test_variable_decline_forced_breakpoint():
    tr = gen_variable_decline_noise(SPEC, T, rng_seed=1, noise_sd=0.0, breakpoint=5, start=36e6, mid=30e6, end=12e6)
    expected = np.interp(np.arange(T), [0, 5, T - 1], [36e6, 30e6, 12e6])
    assert np.allclose(tr.values, expected, rtol=0, atol=1e-6)


def test_linear_decline_flat_when_start_equals_end():
    tr = gen_linear_decline(SPEC, T, rng_seed=4, start=25e6, end=25e6)
    assert np.all(tr.values == 25e6)


def test_moving_uniform_small_window_is_constant():
    tr = gen_moving_uniform(SPEC, T, 1e-9, rng_seed=2)
    assert np.ptp(tr.values) < 1e-7
    with pytest.raises(ValueError):
        gen_moving_uniform(SPEC, T, 0.0, rng_seed=2)


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        gen_linear_decline_noise(SPEC, T, noise_sd=-1.0, rng_seed=0)


@pytest.mark.parametrize("name", sorted(sampling.GENERATORS))
def test_generators_deterministic(name):
    g = sampling.GENERATORS[name]
    assert np.array_equal(g(SPEC, T, 99).values, g(SPEC, T, 99).values)
    assert not np.array_equal(g(SPEC, T, 99).values, g(SPEC, T, 100).values)


@pytest.mark.parametrize("name", sorted(sampling.GENERATORS))
@pytest.mark.parametrize("spec", [SPEC, MONO], ids=["plain", "monotone"])
def test_generators_feasible_1000_draws(name, spec):
    g = sampling.GENERATORS[name]
    worst = max(spec.violation(g(spec, T, s).values) for s in range(1000))
    assert worst <= sampling.FEAS_TOL


def test_moving_uniform_feasible_without_projection(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("projection called")
    monkeypatch.setattr(sampling, "project_feasible", boom)
    for s in range(1000):
        assert SPEC.is_feasible(gen_moving_uniform(SPEC, T, 5e6, s).values)


def test_constant_or_decline_non_increasing():
    for s in range(1000):
        u = gen_constant_or_decline(SPEC, T, s).values
        assert np.all(np.diff(u) <= 0)
        assert np.max(np.abs(np.diff(u))) <= SPEC.dp_max + 1e-9


def test_combined_degenerate_mixture_is_linear_decline():
    for s in range(20):
        a = gen_combined(SPEC, T, s, probs=(1, 0, 0)).values
        b = gen_linear_decline(SPEC, T, s).values
        assert np.array_equal(a, b)


def test_allocation_stratified():
    assert allocate(sampling.STRATEGIES["combined"], 100) == {
        "linear_decline": 33, "constant_or_decline": 33, "decline_hold_decline": 34}
    for N in (30, 31, 47):
        counts = allocate(sampling.STRATEGIES["combined"], N)
        assert sum(counts.values()) == N
        assert min(counts.values()) >= N // 3


def test_sample_trajectories_tags_and_order():
    a = sample_trajectories("combined", SPEC, T, 30, 5)
    b = sample_trajectories("combined", SPEC, T, 30, 5)
    assert [t for _, t in a] == [t for _, t in b]
    assert all(np.array_equal(x.values, y.values) for (x, _), (y, _) in zip(a, b))
    assert {t for _, t in a} == set(sampling.COMBINED_CLASSES)


def test_feasibility_sweep_10k():
    worst = 0.0
    for k, strategy in enumerate(sorted(sampling.STRATEGIES)):
        for spec in (SPEC, MONO):
            for traj, _ in sample_trajectories(strategy, spec, T, 625, 1000 + k):
                worst = max(worst, spec.violation(traj.values))
    assert worst <= sampling.FEAS_TOL


# datasets

def test_build_dataset_small(small_model):
    ds = build_dataset(small_model, "combined", 6, 3)
    assert len(ds) == 6
    assert all(SPEC.is_feasible(u) for u in ds.U)
    assert np.all(ds.J >= 0)
    assert np.ptp(ds.J) > 0
    assert ds.model_fingerprint == small_model.fingerprint()
    with pytest.raises(ValueError):
        build_dataset(small_model, "combined", 0, 3)


def test_build_dataset_single(small_model):
    ds = build_dataset(small_model, "moving_uniform", 1, 0)
    assert len(ds) == 1 and ds.J[0] >= 0


def test_build_dataset_parallel_matches_serial(small_model):
    from concurrent.futures import ThreadPoolExecutor
    a = build_dataset(small_model, "combined", 5, 8)
    with ThreadPoolExecutor(3) as ex:
        b = build_dataset(small_model, "combined", 5, 8, executor=ex)
    assert np.array_equal(a.J, b.J)
    assert a.tags == b.tags


def test_dataset_csv_round_trip_and_bytes(tmp_path, small_model):
    ds = build_dataset(small_model, "combined", 4, 2)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    ds.to_csv(p1)
    build_dataset(small_model, "combined", 4, 2).to_csv(p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "a.csv.meta.json").read_bytes() == (tmp_path / "b.csv.meta.json").read_bytes()
    back = Dataset.from_csv(p1)
    assert np.array_equal(back.U, ds.U)
    assert np.array_equal(back.J, ds.J)
    assert back.tags == ds.tags
    assert back.constraint_spec == ds.constraint_spec
    assert back.model_fingerprint == ds.model_fingerprint
    header = p1.read_text().splitlines()[0].split(",")
    assert header == ["tag", "p_1", "p_2", "p_3", "p_4", "p_5", "J_m3"]


def test_dataset_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("tag,p_1,J_m3\nx,1.0\n")
    with pytest.raises(ValueError, match="expected 3 fields"):
        Dataset.from_csv(p)
    p.write_text("name,p_1,J\n")
    with pytest.raises(ValueError, match="header"):
        Dataset.from_csv(p)
