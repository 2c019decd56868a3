"""Fully connected ReLU surrogate J_hat = F(u) with analytic input gradients.

Inputs and the output are min-max scaled with statistics fitted on the
training split. Training minimises MSE (+ L2 on weights) with Adam and
early stopping on the validation MSE.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SCHEMA = "surrogate/1"
HIDDEN = (64, 128, 64)


class SurrogateFormatError(ValueError):
    pass


@dataclass
class NormalizationStats:
    input_min: np.ndarray
    input_max: np.ndarray
    output_min: float
    output_max: float

    def __post_init__(self):
        self.input_min = np.asarray(self.input_min, dtype=float)
        self.input_max = np.asarray(self.input_max, dtype=float)
        bad = np.flatnonzero(~(self.input_max > self.input_min))
        if bad.size:
            raise ValueError(f"zero input range in dimension(s) {bad.tolist()}")
        if not self.output_max > self.output_min:
            raise ValueError("zero output range")

    @classmethod
    def fit(cls, U, J):
        U = np.asarray(U, dtype=float)
        J = np.asarray(J, dtype=float)
        return cls(U.min(axis=0), U.max(axis=0), float(J.min()), float(J.max()))

    @property
    def input_scale(self):
        return self.input_max - self.input_min

    @property
    def output_scale(self):
        return self.output_max - self.output_min


def normalize(u, stats):
    return (np.asarray(u, dtype=float) - stats.input_min) / stats.input_scale


def denormalize_input(u_norm, stats):
    return np.asarray(u_norm, dtype=float) * stats.input_scale + stats.input_min


def normalize_output(J, stats):
    return (np.asarray(J, dtype=float) - stats.output_min) / stats.output_scale


def denormalize_output(j_norm, stats):
    return np.asarray(j_norm, dtype=float) * stats.output_scale + stats.output_min


@dataclass
class SurrogateModel:
    layer_dims: list
    weights: list  # weights[l] has shape (layer_dims[l], layer_dims[l+1])
    biases: list
    norm_stats: NormalizationStats
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[l], self.layer_dims[l + 1]) or b.shape != (self.layer_dims[l + 1],):
                raise ValueError(f"layer {l}: shapes {w.shape}/{b.shape} inconsistent with layer_dims")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameters")
        if self.norm_stats.input_min.shape != (self.layer_dims[0],):
            raise ValueError("normalisation stats do not match input dimension")

    @property
    def input_dim(self):
        return self.layer_dims[0]

    def copy(self):
        return SurrogateModel(list(self.layer_dims), [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases], self.norm_stats, dict(self.train_meta))

    def __call__(self, u):
        return forward(self, u)


def init_model(layer_dims, stats, rng):
    """He-uniform weights (fan-in), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return SurrogateModel(list(layer_dims), weights, biases, stats)


def _forward_norm(weights, biases, x):
    """Normalised forward pass on a batch; returns output and pre-activations."""
    pre = []
    h = x
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        if l < last:
            pre.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return h[:, 0], pre


def _check_input(model, u):
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != model.input_dim:
        raise ValueError(f"input dimension {u.shape[-1]} != {model.input_dim}")
    return u


def forward(model, u):
    """Denormalised prediction for one trajectory (float) or a batch (array)."""
    u = _check_input(model, u)
    single = u.ndim == 1
    out, _ = _forward_norm(model.weights, model.biases, normalize(np.atleast_2d(u), model.norm_stats))
    J = denormalize_output(out, model.norm_stats)
    return float(J[0]) if single else J


def input_gradient(model, u):
    """dJ_hat/du (m^3/Pa) by backpropagation; subgradient 0 at ReLU kinks."""
    u = _check_input(model, u)
    single = u.ndim == 1
    x = normalize(np.atleast_2d(u), model.norm_stats)
    _, pre = _forward_norm(model.weights, model.biases, x)
    g = np.tile(model.weights[-1][:, 0], (x.shape[0], 1))
    for l in range(len(pre) - 1, -1, -1):
        g = g * (pre[l] > 0)
        g = g @ model.weights[l].T
    g = g * (model.norm_stats.output_scale / model.norm_stats.input_scale)
    return g[0] if single else g


def active_units(model, u):
    """Which hidden ReLUs are on at ``u``, flattened over layers.

    The network is affine on any set where this pattern is constant.
    """
    u = _check_input(model, u)
    _, pre = _forward_norm(model.weights, model.biases, normalize(np.atleast_2d(u), model.norm_stats))
    on = np.concatenate([z > 0 for z in pre], axis=1)
    return on[0] if u.ndim == 1 else on


def forward_and_gradient(model, u):
    u = _check_input(model, u)
    x = normalize(u[None, :], model.norm_stats)
    out, pre = _forward_norm(model.weights, model.biases, x)
    g = model.weights[-1][:, 0][None, :]
    for l in range(len(pre) - 1, -1, -1):
        g = (g * (pre[l] > 0)) @ model.weights[l].T
    s = model.norm_stats
    return float(denormalize_output(out, s)[0]), g[0] * (s.output_scale / s.input_scale)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 300
    early_stop_patience: int = 30
    l2_weight_decay: float = 1e-5
    val_fraction: float = 0.2
    rng_seed: int = 0
    hidden: tuple = HIDDEN

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def study(cls, **kw):
        """Longer budget used by the studies: batch 8, 500 epochs, patience 100, L2 1e-4.

        The plain defaults stop at the epoch cap while validation loss is
        still falling; this stays inside the documented ranges (batch 8-16,
        200-500 epochs, small L2) and lets early stopping do the work.
        """
        base = dict(batch_size=8, max_epochs=500, early_stop_patience=100, l2_weight_decay=1e-4)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainReport:
    train_mse: list
    val_mse: list
    best_epoch: int
    train_idx: np.ndarray
    val_idx: np.ndarray

    @property
    def best_val_history(self):
        return np.minimum.accumulate(np.asarray(self.val_mse))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse"])
            for e, (a, b) in enumerate(zip(self.train_mse, self.val_mse), 1):
                w.writerow([e, repr(float(a)), repr(float(b))])


def _grads(weights, biases, x, y, l2):
    out, pre = _forward_norm(weights, biases, x)
    n = x.shape[0]
    err = out - y
    loss = float(np.mean(err ** 2))
    acts = [x] + [np.maximum(z, 0.0) for z in pre]
    delta = (2.0 / n) * err[:, None]
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for l in range(len(weights) - 1, -1, -1):
        gw[l] = acts[l].T @ delta + l2 * weights[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l].T) * (pre[l - 1] > 0)
    return loss, gw, gb


def _mse(weights, biases, x, y):
    out, _ = _forward_norm(weights, biases, x)
    return float(np.mean((out - y) ** 2))


def train(dataset, cfg: TrainConfig = None):
    """Fit a surrogate to ``dataset``; returns ``(model, report)``."""
    cfg = TrainConfig() if cfg is None else cfg
    U = np.asarray(dataset.U, dtype=float)
    J = np.asarray(dataset.J, dtype=float)
    if len(J) < 10:
        raise ValueError(f"dataset too small ({len(J)} < 10 samples)")
    ss = np.random.SeedSequence(cfg.rng_seed)
    split_rng, init_rng, shuffle_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    perm = split_rng.permutation(len(J))
    n_val = max(1, int(round(cfg.val_fraction * len(J))))
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    if np.ptp(J[train_idx]) == 0:
        raise ValueError("degenerate output range in training split")
    stats = NormalizationStats.fit(U[train_idx], J[train_idx])

    xt, yt = normalize(U[train_idx], stats), normalize_output(J[train_idx], stats)
    xv, yv = normalize(U[val_idx], stats), normalize_output(J[val_idx], stats)

    dims = [U.shape[1], *cfg.hidden, 1]
    model = init_model(dims, stats, init_rng)
    W, B = model.weights, model.biases
    mW = [np.zeros_like(w) for w in W]
    vW = [np.zeros_like(w) for w in W]
    mB = [np.zeros_like(b) for b in B]
    vB = [np.zeros_like(b) for b in B]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    best = (math.inf, 0, [w.copy() for w in W], [b.copy() for b in B])
    train_hist, val_hist = [], []
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_idx))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, gw, gb = _grads(W, B, xt[batch], yt[batch], cfg.l2_weight_decay)
            step += 1
            c1 = 1.0 - beta1 ** step
            c2 = 1.0 - beta2 ** step
            for p, g, m, v in zip(W + B, gw + gb, mW + mB, vW + vB):
                m *= beta1
                m += (1 - beta1) * g
                v *= beta2
                v += (1 - beta2) * g * g
                p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
        train_hist.append(_mse(W, B, xt, yt))
        val_hist.append(_mse(W, B, xv, yv))
        if val_hist[-1] < best[0]:
            best = (val_hist[-1], epoch, [w.copy() for w in W], [b.copy() for b in B])
        elif epoch - best[1] >= cfg.early_stop_patience:
            break
    model = SurrogateModel(dims, best[2], best[3], stats, {
        "seed": cfg.rng_seed,
        "epochs_run": len(val_hist),
        "best_epoch": best[1],
        "final_val_loss": best[0],
        "train_config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
    })
    return model, TrainReport(train_hist, val_hist, best[1], train_idx, val_idx)


@dataclass
class RegressionMetrics:
    mae: float
    rmse: float
    r2: float  # nan when the targets have zero variance
    mean_relative_error: float
    n: int
    n_zero_targets: int = 0

    @property
    def degenerate(self):
        return math.isnan(self.r2)


def regression_metrics(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if target.size == 0:
        raise ValueError("no samples")
    err = pred - target
    ss_res = float(np.sum(err ** 2))
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan
    pos = target > 0
    mre = float(np.mean(np.abs(err[pos]) / target[pos])) if pos.any() else math.nan
    return RegressionMetrics(
        mae=float(np.mean(np.abs(err))),
        rmse=math.sqrt(ss_res / target.size),
        r2=r2,
        mean_relative_error=mre,
        n=int(target.size),
        n_zero_targets=int(np.sum(~pos)),
    )


def evaluate_metrics(model, dataset):
    return regression_metrics(forward(model, dataset.U), dataset.J)


def _to_list(a):
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(model):
    s = model.norm_stats
    return {
        "schema": SCHEMA,
        "layer_dims": list(model.layer_dims),
        "activation": "relu",
        "output_activation": "linear",
        "weights": [_to_list(w) for w in model.weights],
        "biases": [_to_list(b) for b in model.biases],
        "norm_stats": {
            "input_min": _to_list(s.input_min),
            "input_max": _to_list(s.input_max),
            "output_min": float(s.output_min),
            "output_max": float(s.output_max),
        },
        "train_meta": model.train_meta,
    }


def model_from_dict(d):
    for key in ("schema", "layer_dims", "weights", "biases", "norm_stats"):
        if key not in d:
            raise SurrogateFormatError(f"missing field {key!r}")
    if d["schema"] != SCHEMA:
        raise SurrogateFormatError(f"unsupported schema {d['schema']!r}")
    ns = d["norm_stats"]
    for key in ("input_min", "input_max", "output_min", "output_max"):
        if key not in ns:
            raise SurrogateFormatError(f"missing field 'norm_stats.{key}'")
    try:
        stats = NormalizationStats(ns["input_min"], ns["input_max"], ns["output_min"], ns["output_max"])
        return SurrogateModel(d["layer_dims"], d["weights"], d["biases"], stats, d.get("train_meta", {}))
    except (ValueError, TypeError) as err:
        raise SurrogateFormatError(str(err)) from None


def dumps_model(model):
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n"


def save_model(model, path):
    Path(path).write_text(dumps_model(model))


def load_model(path):
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as err:
        raise SurrogateFormatError(f"{path}: line {err.lineno} column {err.colno}: {err.msg}") from None
    if not isinstance(d, dict):
        raise SurrogateFormatError(f"{path}: top level must be an object")
    return model_from_dict(d)
