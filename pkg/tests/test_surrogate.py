import math

import numpy as np
import pytest

from drawdown_opt.sampling import ConstraintSpec, ControlTrajectory, Dataset, Sample, sample_trajectories
from drawdown_opt.surrogate import (
    NormalizationStats, SurrogateFormatError, active_units, SurrogateModel, TrainConfig, denormalize_input,
    denormalize_output, dumps_model, evaluate_metrics, forward, forward_and_gradient, init_model,
    input_gradient, load_model, normalize, normalize_output, regression_metrics, save_model, train,
)

IDENTITY2 = NormalizationStats([0.0, 0.0], [1.0, 1.0], 0.0, 1.0)


def hand_net():
    return SurrogateModel([2, 2, 1], [np.eye(2), np.ones((2, 1))], [np.zeros(2), np.zeros(1)], IDENTITY2)


def synthetic(fn, n=100, T=5, seed=0):
    rng = np.random.default_rng(seed)
    U = rng.uniform(10e6, 38e6, (n, T))
    samples = [Sample(ControlTrajectory(u), float(fn(u)), "syn") for u in U]
    return Dataset(samples, ConstraintSpec(dp_max=28e6), "synthetic", seed)


@pytest.fixture(scope="module")
def trained():
    ds = synthetic(lambda u: 1000.0 - 20.0 * np.sum(((u - 24e6) / 14e6) ** 2) + 5.0 * np.sin(u[0] / 4e6))
    model, rep = train(ds, TrainConfig(max_epochs=60, rng_seed=3))
    return model, rep, ds


# normalisation

def test_normalize_ends_and_midpoint():
    s = NormalizationStats([1.0, -2.0], [3.0, 2.0], 5.0, 7.0)
    assert np.array_equal(normalize([1.0, -2.0], s), [0.0, 0.0])
    assert np.array_equal(normalize([3.0, 2.0], s), [1.0, 1.0])
    assert np.array_equal(normalize([2.0, 0.0], s), [0.5, 0.5])
    assert normalize_output(6.0, s) == 0.5


def test_normalize_round_trip():
    rng = np.random.default_rng(1)
    s = NormalizationStats(rng.uniform(0, 1e7, 20), rng.uniform(2e7, 4e7, 20), 10.0, 1500.0)
    x = rng.uniform(-1e7, 5e7, (50, 20))
    assert np.allclose(denormalize_input(normalize(x, s), s), x, rtol=1e-12, atol=0)
    y = rng.uniform(0, 2000, 50)
    assert np.allclose(denormalize_output(normalize_output(y, s), s), y, rtol=1e-12, atol=0)


def test_zero_range_rejected():
    with pytest.raises(ValueError, match="dimension"):
        NormalizationStats([0.0, 1.0], [1.0, 1.0], 0.0, 1.0)
    with pytest.raises(ValueError, match="output"):
        NormalizationStats([0.0], [1.0], 2.0, 2.0)


# forward / gradient

def test_hand_network_forward_and_gradient():
    m = hand_net()
    assert forward(m, [0.3, 0.4]) == pytest.approx(0.7, abs=1e-15)
    assert forward(m, [-0.3, 0.4]) == pytest.approx(0.4, abs=1e-15)
    assert np.array_equal(input_gradient(m, [0.3, 0.4]), [1.0, 1.0])
    assert np.array_equal(input_gradient(m, [-0.3, 0.4]), [0.0, 1.0])
    J, g = forward_and_gradient(m, np.array([0.3, 0.4]))
    assert J == pytest.approx(0.7) and np.array_equal(g, [1.0, 1.0])


def test_active_units_hand_network():
    m = hand_net()
    assert np.array_equal(active_units(m, [0.3, -0.4]), [True, False])
    assert active_units(m, np.array([[0.3, 0.4], [-1.0, -1.0]])).tolist() == [[True, True], [False, False]]


def test_zero_network():
    s = NormalizationStats(np.zeros(4), np.ones(4), 100.0, 300.0)
    m = init_model([4, 8, 1], s, np.random.default_rng(0))
    m.weights = [np.zeros_like(w) for w in m.weights]
    assert forward(m, np.full(4, 0.5)) == 100.0
    assert np.array_equal(input_gradient(m, np.full(4, 0.5)), np.zeros(4))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(hand_net(), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        input_gradient(hand_net(), [1.0])


def test_batch_forward_matches_single(trained):
    m, _, ds = trained
    U = ds.U[:7]
    assert np.allclose(forward(m, U), [forward(m, u) for u in U], rtol=1e-14)
    assert np.allclose(input_gradient(m, U), [input_gradient(m, u) for u in U], rtol=1e-14)


def test_gradient_matches_central_differences(trained):
    m, _, ds = trained
    rng = np.random.default_rng(11)
    h = 1e-4 * 28e6
    checked = 0
    while checked < 20:
        u = rng.uniform(10e6, 38e6, m.input_dim)
        stencil = np.concatenate([u + h * np.eye(u.size), u - h * np.eye(u.size)])
        # skip points whose stencil crosses a rectifier kink
        if not np.all(active_units(m, stencil) == active_units(m, u)):
            continue
        g = input_gradient(m, u)
        fd = np.array([(forward(m, u + h * e) - forward(m, u - h * e)) / (2 * h) for e in np.eye(u.size)])
        assert np.max(np.abs(fd - g)) / np.max(np.abs(g)) < 1e-5
        checked += 1


# training

def test_train_report_and_meta(trained):
    m, rep, ds = trained
    assert len(rep.train_mse) == len(rep.val_mse) == m.train_meta["epochs_run"]
    assert np.all(np.diff(rep.best_val_history) <= 0)
    assert m.train_meta["best_epoch"] == rep.best_epoch
    assert m.train_meta["final_val_loss"] == min(rep.val_mse)
    assert len(rep.val_idx) == 20 and len(rep.train_idx) == 80
    assert set(rep.val_idx).isdisjoint(rep.train_idx)
    # normalisation fitted on the training split only
    U = ds.U[rep.train_idx]
    assert np.array_equal(m.norm_stats.input_min, U.min(axis=0))


def test_train_deterministic_bytes():
    ds = synthetic(lambda u: float(u.sum() / 1e6), n=30)
    cfg = TrainConfig(max_epochs=10, rng_seed=5)
    a, _ = train(ds, cfg)
    b, _ = train(ds, cfg)
    assert dumps_model(a) == dumps_model(b)
    c, _ = train(ds, TrainConfig(max_epochs=10, rng_seed=6))
    assert dumps_model(a) != dumps_model(c)


def test_train_errors():
    with pytest.raises(ValueError, match="too small"):
        train(synthetic(lambda u: u[0], n=9))
    with pytest.raises(ValueError, match="degenerate"):
        train(synthetic(lambda u: 500.0, n=20))
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_train_near_constant_target():
    rng = np.random.default_rng(2)
    jitter = rng.uniform(-1, 1, 100) * 0.5  # +-0.1% of 500
    it = iter(jitter)
    ds = synthetic(lambda u: 500.0 + next(it), n=100)
    m, rep = train(ds, TrainConfig(rng_seed=1))
    pred = forward(m, ds.U[rep.val_idx])
    assert np.max(np.abs(pred - 500.0)) / 500.0 < 0.01


def test_train_linear_in_first_control():
    # smooth generator trajectories as inputs; i.i.d. uniform inputs in every
    # dimension leave 80 samples too few for a network of this size
    spec = ConstraintSpec()
    drawn = sample_trajectories("combined", spec, 20, 100, 0)
    ds = Dataset([Sample(t, 100.0 + 50.0 * (38e6 - t.values[0]) / 28e6, tag) for t, tag in drawn], spec, "syn", 0)
    m, rep = train(ds, TrainConfig.study(rng_seed=0))
    assert evaluate_metrics(m, ds.subset(rep.val_idx)).r2 > 0.99


def test_study_config_within_ranges():
    c = TrainConfig.study()
    assert 8 <= c.batch_size <= 16
    assert 200 <= c.max_epochs <= 500
    assert c.learning_rate == 1e-3 and c.val_fraction == 0.2
    assert TrainConfig.study(rng_seed=4).rng_seed == 4


# metrics

def test_metrics_hand_case():
    m = regression_metrics([1, 2, 4], [1, 2, 3])
    assert m.mae == pytest.approx(1 / 3)
    assert m.rmse == pytest.approx(1 / math.sqrt(3))
    assert m.r2 == pytest.approx(0.5)
    assert m.mean_relative_error == pytest.approx(1 / 9)


def test_metrics_edge_cases():
    t = np.array([3.0, 5.0, 10.0])
    perfect = regression_metrics(t, t)
    assert (perfect.mae, perfect.rmse, perfect.r2) == (0.0, 0.0, 1.0)
    assert regression_metrics(np.full(3, t.mean()), t).r2 == pytest.approx(0.0, abs=1e-15)
    flat = regression_metrics([1.0, 2.0], [2.0, 2.0])
    assert flat.degenerate and math.isnan(flat.r2)
    zero = regression_metrics([1.0, 2.0], [0.0, 4.0])
    assert zero.n_zero_targets == 1 and zero.mean_relative_error == pytest.approx(0.5)
    with pytest.raises(ValueError):
        regression_metrics([], [])


# persistence

def test_save_load_round_trip(tmp_path, trained):
    m, _, _ = trained
    path = tmp_path / "proxy.json"
    save_model(m, path)
    back = load_model(path)
    x = np.random.default_rng(4).uniform(10e6, 38e6, (100, m.input_dim))
    assert np.allclose(forward(back, x), forward(m, x), rtol=1e-12, atol=0)
    assert back.train_meta == m.train_meta
    assert dumps_model(back) == path.read_text()


def test_load_errors(tmp_path, trained):
    import json
    m, _, _ = trained
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "surrogate/1",\n "layer_dims": [2, 1\n')
    with pytest.raises(SurrogateFormatError, match="line"):
        load_model(path)
    d = json.loads(dumps_model(m))
    del d["norm_stats"]["output_max"]
    path.write_text(json.dumps(d))
    with pytest.raises(SurrogateFormatError, match="output_max"):
        load_model(path)
    d = json.loads(dumps_model(m))
    d["schema"] = "surrogate/99"
    path.write_text(json.dumps(d))
    with pytest.raises(SurrogateFormatError, match="schema"):
        load_model(path)
    d = json.loads(dumps_model(m))
    d["layer_dims"][1] = 3
    path.write_text(json.dumps(d))
    with pytest.raises(SurrogateFormatError):
        load_model(path)
