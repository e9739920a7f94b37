"""Desk-scale target classifiers and the synthetic datasets they train on."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn import (
    AdamState, Conv2d, Dense, Flatten, MaxPool2d, NumericalError, ReLU, ShapeError,
    TargetModel, adam_step, as_tensor, forward, forward_batch, loss_and_grad_params, softmax,
)

log = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (N, *input_shape)
    labels: np.ndarray  # (N,)
    sample_ids: list

    def __post_init__(self):
        self.inputs = as_tensor(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = [str(s) for s in self.sample_ids]
        if not (len(self.inputs) == len(self.labels) == len(self.sample_ids)):
            raise ValueError("inputs, labels and sample_ids must have equal length")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("sample_ids must be unique")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], [self.sample_ids[i] for i in idx])

    def split(self, n_first: int):
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0; batch_size and learning_rate positive")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    seed: int = 0

    @property
    def final_val_acc(self) -> Optional[float]:
        return self.val_acc[-1] if self.val_acc else None


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_mlp(input_dim: int, hidden_dims: Sequence[int], num_classes: int,
              seed: int = 0, model_id: str = "mlp") -> TargetModel:
    dims = [input_dim, *hidden_dims, num_classes]
    if any(int(d) < 1 for d in dims):
        raise ValueError("all layer widths must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = _uniform_init(rng, (d_out, d_in), d_in)
        b = _uniform_init(rng, (d_out,), d_in)
        layers.append(Dense(w, b))
        if i < len(dims) - 2:
            layers.append(ReLU())
    return TargetModel(layers, (input_dim,), num_classes, model_id,
                       meta={"arch": "mlp", "hidden": list(hidden_dims), "seed": seed})


def build_cnn(input_shape: Sequence[int], channel_plan: Sequence[int], num_classes: int,
              kernel_size: int = 3, pool: int = 2, seed: int = 0, model_id: str = "cnn") -> TargetModel:
    """conv(k, valid) -> relu -> maxpool blocks, then flatten and a dense head."""
    if len(input_shape) != 3:
        raise ValueError("input_shape must be (channels, height, width)")
    rng = np.random.default_rng(seed)
    c, h, w = (int(s) for s in input_shape)
    layers = []
    for out_c in channel_plan:
        fan_in = c * kernel_size * kernel_size
        layers.append(Conv2d(_uniform_init(rng, (out_c, c, kernel_size, kernel_size), fan_in),
                             _uniform_init(rng, (out_c,), fan_in)))
        layers.append(ReLU())
        h, w = h - kernel_size + 1, w - kernel_size + 1
        if h < pool or w < pool:
            raise ShapeError(f"spatial dims exhausted after {len(layers) // 3 + 1} blocks: {h}x{w}")
        layers.append(MaxPool2d(pool))
        h, w, c = (h - pool) // pool + 1, (w - pool) // pool + 1, out_c
    layers.append(Flatten())
    flat = c * h * w
    layers.append(Dense(_uniform_init(rng, (num_classes, flat), flat), _uniform_init(rng, (num_classes,), flat)))
    return TargetModel(layers, tuple(input_shape), num_classes, model_id,
                       meta={"arch": "cnn", "channels": list(channel_plan), "seed": seed})


def predict(model: TargetModel, x):
    """(label, probabilities); ties go to the lowest class index."""
    logits = forward(model, x).logits
    probs = softmax(logits)
    return int(np.argmax(logits)), probs


def predict_labels(model: TargetModel, xs) -> np.ndarray:
    return np.argmax(forward_batch(model, xs), axis=1)


def accuracy(model: TargetModel, data: LabeledDataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict_labels(model, data.inputs) == data.labels))


def train_target(model: TargetModel, train: LabeledDataset, val: Optional[LabeledDataset],
                 cfg: TrainConfig):
    """Minimise mean cross-entropy with Adam. Mutates and returns ``model``."""
    if len(train) == 0:
        raise ValueError("empty training set")
    if train.labels.min() < 0 or train.labels.max() >= model.num_classes:
        raise ValueError("training labels out of range")
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory(seed=cfg.seed)
    params = [p.copy() for p in model.params]
    state = AdamState.zeros_like(params)
    n = len(train)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, grads = loss_and_grad_params(model, train.inputs[idx], train.labels[idx])
                params, state = adam_step(params, grads, state, cfg.learning_rate)
            except NumericalError as exc:
                raise NumericalError(f"training diverged at epoch {epoch}: {exc}") from None
            model.set_params(params)
            total += loss * len(idx)
        history.train_loss.append(total / n)
        history.train_acc.append(accuracy(model, train))
        if val is not None and len(val):
            history.val_acc.append(accuracy(model, val))
        log.debug("epoch %d loss %.4f", epoch, history.train_loss[-1])
    return model, history


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def _ids(prefix: str, n: int) -> list:
    return [f"{prefix}{i:05d}" for i in range(n)]


def make_binary_features(n: int, n_features: int = 20, seed: int = 0,
                         low: float = 0.25, high: float = 0.75, prefix: str = "m") -> LabeledDataset:
    """Malware-like binary vectors.

    Each feature is a Bernoulli draw whose rate depends on the class; a random
    half of the features fire at ``high`` for class 1 and ``low`` for class 0,
    the other half the reverse.
    """
    rng = np.random.default_rng(seed)
    polarity = rng.permutation(np.arange(n_features) % 2).astype(bool)
    rates = np.where(polarity, high, low)
    labels = rng.integers(0, 2, size=n)
    p = np.where(labels[:, None] == 1, rates[None, :], 1.0 - rates[None, :])
    x = (rng.random((n, n_features)) < p).astype(np.float64)
    return LabeledDataset(x, labels, _ids(prefix, n))


def make_image_blobs(n: int, num_classes: int = 2, side: int = 8, seed: int = 0,
                     noise: float = 0.15, prefix: str = "v") -> LabeledDataset:
    """Vision-like Gaussian blobs around per-class prototypes, shaped (1, side, side)."""
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0.2, 0.8, size=(num_classes, side * side))
    labels = rng.integers(0, num_classes, size=n)
    x = protos[labels] + noise * rng.standard_normal((n, side * side))
    x = np.clip(x, 0.0, 1.0).reshape(n, 1, side, side)
    return LabeledDataset(x, labels, _ids(prefix, n))


def make_gaussian_blobs(n: int, n_features: int = 8, seed: int = 0, separation: float = 3.0,
                        prefix: str = "g") -> LabeledDataset:
    """Two isotropic Gaussian classes whose means sit ``separation`` apart."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(n_features)
    direction /= np.linalg.norm(direction)
    labels = rng.integers(0, 2, size=n)
    centers = np.where(labels[:, None] == 1, 0.5, -0.5) * separation * direction[None, :]
    x = centers + rng.standard_normal((n, n_features))
    return LabeledDataset(x, labels, _ids(prefix, n))
