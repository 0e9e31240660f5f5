"""Fully connected regressor from sideband spectra to scaled (nbar, omega_t).

Plain numpy, float64 throughout.  Weights are stored ``(fan_in, fan_out)`` so
a batch ``X`` of shape ``(n, fan_in)`` propagates as ``X @ W + b``.
"""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataset import Dataset, ParamBox, binomial_noise, unscale_targets
from .exceptions import FormatError, InvalidInputError, QMismatchError

MAGIC = b"MLPT"
FORMAT_VERSION = 1
ACTIVATION_TAGS = {"linear": 0, "tanh": 1, "relu": 2}
_TAG_NAMES = {v: k for k, v in ACTIVATION_TAGS.items()}
DEFAULT_ACTIVATIONS = ("tanh", "tanh", "relu")


@dataclass
class MlpModel:
    weights: list
    biases: list
    activations: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("need one bias vector per weight matrix")
        if len(self.activations) != len(self.weights) - 1:
            raise InvalidInputError(
                f"{len(self.activations)} activation tags for {len(self.weights) - 1} hidden layers"
            )
        for a in self.activations:
            if a not in ("tanh", "relu"):
                raise InvalidInputError(f"unknown hidden activation {a!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInputError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise InvalidInputError(f"layer {i}: input dimension breaks the chain")
        self.activations = tuple(self.activations)

    @property
    def layer_dims(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_sidebands(self) -> int:
        return self.layer_dims[0] - 1

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def forward(self, X):
        return forward(self, X)

    def predict(self, X) -> np.ndarray:
        """Unscaled, box-clamped ``(nbar, omega_t)`` for each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return predict_batch(self, X).values


def init_model(
    n_sidebands: int,
    hidden_width: int = 1024,
    seed: int = 0,
    n_hidden: int = 3,
    activations=DEFAULT_ACTIVATIONS,
) -> MlpModel:
    """Uniform ``(-1/sqrt(fan_in), 1/sqrt(fan_in))`` weights, zero biases."""
    if n_sidebands < 1 or hidden_width < 1 or n_hidden < 1:
        raise InvalidInputError("n_sidebands, hidden_width and n_hidden must be positive")
    activations = tuple(activations)
    if len(activations) != n_hidden:
        raise InvalidInputError(f"need {n_hidden} activation tags, got {len(activations)}")
    dims = [n_sidebands + 1] + [hidden_width] * n_hidden + [2]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, activations, meta={"n_sidebands": n_sidebands, "init_seed": seed})


def _activate(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _check_input(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.layer_dims[0]:
        raise QMismatchError(
            f"input has {X.shape[-1]} features, model expects {model.layer_dims[0]} "
            f"(eta plus Q={model.n_sidebands} populations)"
        )
    return X


def _forward_cache(model, X):
    zs, acts = [], [X]
    a = X
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        zs.append(z)
        a = _activate(model.activations[i], z) if i < len(model.activations) else z
        acts.append(a)
    return zs, acts


def forward(model: MlpModel, X) -> np.ndarray:
    """Scaled outputs ``(y1_hat, y2_hat)``; a 1-D input gives a length-2 vector."""
    X = _check_input(model, X)
    single = X.ndim == 1
    _, acts = _forward_cache(model, np.atleast_2d(X))
    return acts[-1][0] if single else acts[-1]


def loss(pred, target) -> float:
    """Mean over records of ``(|y1 - y1_hat| + |y2 - y2_hat|) / 2``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    return float(np.abs(pred - target).sum(axis=1).mean() / 2.0)


def backward(model: MlpModel, X, Y):
    """Mean batch loss and its gradient ``[(dW, db), ...]`` per layer.

    The absolute value's kink takes subgradient 0.
    """
    X = _check_input(model, np.atleast_2d(X))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(X) == 0:
        raise InvalidInputError("empty batch")
    zs, acts = _forward_cache(model, X)
    resid = acts[-1] - Y
    value = float(np.abs(resid).sum(axis=1).mean() / 2.0)
    delta = np.sign(resid) / (2.0 * len(X))
    grads = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i:
            delta = delta @ model.weights[i].T
            if model.activations[i - 1] == "tanh":
                delta *= 1.0 - acts[i] ** 2
            else:
                delta *= zs[i - 1] > 0
    return value, grads


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    noise_n: int | None = None
    lr_schedule: str = "cosine"
    final_lr_fraction: float = 0.01
    holdout_fraction: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.noise_n is not None and self.noise_n < 1:
            raise InvalidInputError("noise_n must be at least 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidInputError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.holdout_fraction < 1:
            raise InvalidInputError("holdout_fraction must lie in [0, 1)")

    def learning_rate_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.learning_rate
        lo = self.learning_rate * self.final_lr_fraction
        frac = epoch / (self.epochs - 1)
        return lo + 0.5 * (self.learning_rate - lo) * (1 + math.cos(math.pi * frac))


class AdamState:
    def __init__(self, model: MlpModel):
        self.step = 0
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(model.weights, model.biases)]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(model.weights, model.biases)]

    def update(self, model: MlpModel, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step += 1
        c1 = 1.0 - beta1**self.step
        c2 = 1.0 - beta2**self.step
        params = [model.weights, model.biases]
        for i, g_pair in enumerate(grads):
            for k, g in enumerate(g_pair):
                m, v = self.m[i][k], self.v[i][k]
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                params[k][i] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _training_arrays(dataset):
    if isinstance(dataset, Dataset):
        return dataset.eta, dataset.populations, dataset.scaled_targets
    eta, pops, targets = dataset
    return np.asarray(eta, float), np.atleast_2d(np.asarray(pops, float)), np.asarray(targets, float)


def train(model: MlpModel, dataset, config: TrainConfig = None, callback=None):
    """Minibatch Adam on the L1 loss; returns a trained copy and per-epoch mean losses.

    ``dataset`` is a :class:`Dataset` or a tuple ``(eta, populations, scaled_targets)``.
    With ``config.noise_n`` set, every epoch redraws binomial projection noise
    on the clean populations, keyed by ``(seed, epoch, record)``.
    """
    config = config or TrainConfig()
    eta, pops, targets = _training_arrays(dataset)
    if pops.shape[1] != model.n_sidebands:
        raise QMismatchError(
            f"dataset has Q={pops.shape[1]}, model expects Q={model.n_sidebands}"
        )
    model = model.copy()
    if isinstance(dataset, Dataset):
        box = asdict(dataset.box)
        box.pop("n_sidebands")
        model.meta["box"] = {k: list(v) for k, v in box.items()}
    n = len(eta)
    n_val = int(round(n * config.holdout_fraction))
    n_fit = n - n_val
    if config.epochs and n_fit == 0:
        raise InvalidInputError("no training records")
    state = AdamState(model)
    history, val_history = [], []
    for epoch in range(config.epochs):
        if config.noise_n:
            epoch_pops = binomial_noise(pops[:n_fit], config.noise_n, config.seed, epoch=epoch)
        else:
            epoch_pops = pops[:n_fit]
        X = np.column_stack([eta[:n_fit], epoch_pops])
        Y = targets[:n_fit]
        order = (
            np.random.default_rng([config.seed, epoch]).permutation(n_fit)
            if config.shuffle
            else np.arange(n_fit)
        )
        lr = config.learning_rate_at(epoch)
        total = 0.0
        for start in range(0, n_fit, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads = backward(model, X[idx], Y[idx])
            state.update(model, grads, lr, config.beta1, config.beta2, config.adam_epsilon)
            total += value * len(idx)
        history.append(total / n_fit)
        if n_val:
            Xv = np.column_stack([eta[n_fit:], pops[n_fit:]])
            val_history.append(loss(forward(model, Xv), targets[n_fit:]))
        if callback is not None:
            callback(epoch, history[-1])
    meta = model.meta
    meta["epochs_trained"] = meta.get("epochs_trained", 0) + config.epochs
    meta["train_config"] = asdict(config)
    if history:
        meta["final_loss"] = history[-1]
        meta["loss_history"] = meta.get("loss_history", []) + history
    if val_history:
        meta["val_history"] = val_history
    if config.noise_n:
        meta["noise_n"] = config.noise_n
    return model, history


class Prediction(NamedTuple):
    nbar: float
    omega_t: float
    clamped: bool


class BatchPrediction(NamedTuple):
    values: np.ndarray  # (n, 2) nbar, omega_t
    clamped: np.ndarray  # (n,) bool


def _model_box(model):
    box = model.meta.get("box")
    if box is None:
        return ParamBox(n_sidebands=model.n_sidebands)
    return ParamBox(
        tuple(box["nbar_range"]), tuple(box["eta_range"]), tuple(box["omega_t_range"]),
        model.n_sidebands,
    )


def predict_batch(model: MlpModel, X) -> BatchPrediction:
    X = _check_input(model, np.atleast_2d(X))
    y = forward(model, X)
    nbar, omega_t = unscale_targets(y[:, 0], y[:, 1])
    box = _model_box(model)
    raw = np.column_stack([nbar, omega_t])
    lo = np.array([box.nbar_range[0], box.omega_t_range[0]])
    hi = np.array([box.nbar_range[1], box.omega_t_range[1]])
    # NaN fails both comparisons; map it to the lower bound
    out = np.where(np.isnan(raw), lo, np.clip(raw, lo, hi))
    clamped = np.any(out != raw, axis=1)
    return BatchPrediction(out, clamped)


def predict(model: MlpModel, eta: float, populations) -> Prediction:
    populations = np.asarray(populations, dtype=np.float64).ravel()
    if len(populations) != model.n_sidebands:
        raise QMismatchError(
            f"got {len(populations)} populations, model expects Q={model.n_sidebands}"
        )
    res = predict_batch(model, np.concatenate(([eta], populations)))
    return Prediction(float(res.values[0, 0]), float(res.values[0, 1]), bool(res.clamped[0]))


# --- serialization ---------------------------------------------------------

def model_to_bytes(model: MlpModel) -> bytes:
    dims = model.layer_dims
    n_layers = len(model.weights)
    tags = [ACTIVATION_TAGS[a] for a in model.activations] + [ACTIVATION_TAGS["linear"]]
    parts = [
        MAGIC,
        struct.pack("<IH", FORMAT_VERSION, n_layers),
        struct.pack(f"<{len(dims)}I", *dims),
        struct.pack(f"<{n_layers}B", *tags),
    ]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    meta = json.dumps(model.meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


def save_model(model: MlpModel, path):
    Path(path).write_bytes(model_to_bytes(model))


def _take(data, offset, size, field_name):
    if offset + size > len(data):
        raise FormatError(f"file truncated at byte {len(data)}, need {offset + size}", field_name)
    return data[offset:offset + size], offset + size


def model_from_bytes(data: bytes) -> MlpModel:
    raw, off = _take(data, 0, 4, "magic")
    if raw != MAGIC:
        raise FormatError(f"expected {MAGIC!r}, found {raw!r}", "magic")
    raw, off = _take(data, off, 6, "version")
    version, n_layers = struct.unpack("<IH", raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", "version")
    if n_layers < 1:
        raise FormatError("model has no layers", "layer_count")
    raw, off = _take(data, off, 4 * (n_layers + 1), "dims")
    dims = struct.unpack(f"<{n_layers + 1}I", raw)
    if dims[-1] != 2 or min(dims) < 1:
        raise FormatError(f"invalid dimension chain {dims}", "dims")
    raw, off = _take(data, off, n_layers, "activations")
    tags = list(raw)
    if tags[-1] != ACTIVATION_TAGS["linear"] or any(t not in _TAG_NAMES for t in tags):
        raise FormatError(f"invalid activation tags {tags}", "activations")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        raw, off = _take(data, off, 8 * fan_in * fan_out, f"weights[{i}]")
        weights.append(np.frombuffer(raw, dtype="<f8").reshape(fan_in, fan_out).astype(np.float64))
        raw, off = _take(data, off, 8 * fan_out, f"biases[{i}]")
        biases.append(np.frombuffer(raw, dtype="<f8").astype(np.float64))
    raw, off = _take(data, off, 4, "metadata_length")
    (meta_len,) = struct.unpack("<I", raw)
    raw, off = _take(data, off, meta_len, "metadata")
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", "metadata")
    try:
        meta = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(str(exc), "metadata") from exc
    if meta.get("n_sidebands", dims[0] - 1) != dims[0] - 1:
        raise FormatError(
            f"metadata Q={meta['n_sidebands']} disagrees with input dimension {dims[0]}",
            "n_sidebands",
        )
    for i, (w, b) in enumerate(zip(weights, biases)):
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise FormatError("non-finite parameter", f"layer[{i}]")
    return MlpModel(weights, biases, tuple(_TAG_NAMES[t] for t in tags[:-1]), meta)


def load_model(path) -> MlpModel:
    return model_from_bytes(Path(path).read_bytes())
