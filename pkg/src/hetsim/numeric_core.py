"""Small trainable models, cross-entropy gradients, SGD steps and synthetic data.

Everything here is a pure function of its inputs and works in float64.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    version: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class MiniBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"features {x.shape} and labels {y.shape} disagree")
        if y.size < 1:
            raise ShapeError("mini-batch must hold at least one sample")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return int(self.labels.size)


@dataclass(frozen=True)
class GradientUpdate:
    grad: np.ndarray
    worker_id: int
    batch_size: int
    model_version: int


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 3
    feature_dim: int = 8
    samples_per_class: int = 300
    cluster_spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "feature_dim", "samples_per_class"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"dataset {name} must be positive")
        if self.num_classes < 2:
            raise ConfigError("dataset needs at least two classes")
        if not self.cluster_spread > 0:
            raise ConfigError("dataset cluster_spread must be positive")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return int(self.labels.size)

    def batch(self, indices) -> MiniBatch:
        return MiniBatch(self.features[indices], self.labels[indices])

    def full(self) -> MiniBatch:
        return MiniBatch(self.features, self.labels)

    def split(self, holdout: float, seed: int) -> Tuple["Dataset", "Dataset"]:
        """Shuffle deterministically and return (train, held_out)."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        n_hold = int(round(holdout * len(self)))
        hold, train = order[:n_hold], order[n_hold:]
        return (Dataset(self.features[train], self.labels[train], self.num_classes),
                Dataset(self.features[hold], self.labels[hold], self.num_classes))


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Gaussian blobs, one per class, with means drawn from ``spec.seed``.

    Class means are standard-normal vectors scaled to sit about 3 units apart
    on average, so small ``cluster_spread`` values give separable data.
    """
    rng = np.random.default_rng(spec.seed)
    means = rng.standard_normal((spec.num_classes, spec.feature_dim))
    means *= 3.0 / np.sqrt(2.0)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.standard_normal((labels.size, spec.feature_dim)) * spec.cluster_spread
    features = means[labels] + noise
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order].astype(np.int64), spec.num_classes)


def save_dataset_csv(dataset: Dataset, path) -> None:
    d = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(d)] + ["label"])
        for row, lab in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_dataset_csv(path, num_classes: Optional[int] = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise ConfigError(f"{path}: last column must be 'label'")
    data = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(data.reshape(len(body), len(header) - 1), labels, k)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class SoftmaxRegression:
    """Multinomial logistic regression; params are W (d x k) then bias (k)."""

    def __init__(self, feature_dim: int, num_classes: int):
        self.feature_dim = feature_dim
        self.num_classes = num_classes

    @property
    def num_params(self) -> int:
        return (self.feature_dim + 1) * self.num_classes

    def init_params(self, seed: int = 0, scale: float = 0.01) -> ParamVector:
        rng = np.random.default_rng(seed)
        return ParamVector(rng.standard_normal(self.num_params) * scale)

    def _unpack(self, theta):
        d, k = self.feature_dim, self.num_classes
        return theta[: d * k].reshape(d, k), theta[d * k:]

    def logits(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        w, b = self._unpack(theta)
        return x @ w + b

    def loss_and_grad(self, theta: np.ndarray, batch: MiniBatch) -> Tuple[float, np.ndarray]:
        x, y = batch.features, batch.labels
        n = y.size
        logp = _log_softmax(self.logits(theta, x))
        loss = -logp[np.arange(n), y].mean()
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0
        delta /= n
        gw = x.T @ delta
        gb = delta.sum(axis=0)
        return float(loss), np.concatenate([gw.ravel(), gb])

    def activation_floats(self, batch_size: int) -> int:
        # logits + probabilities
        return 2 * batch_size * self.num_classes


class TanhMLP:
    """One hidden layer with tanh; params are W1, b1, W2, b2 flattened."""

    def __init__(self, feature_dim: int, num_classes: int, hidden: int = 16):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden = hidden

    @property
    def num_params(self) -> int:
        d, h, k = self.feature_dim, self.hidden, self.num_classes
        return d * h + h + h * k + k

    def init_params(self, seed: int = 0, scale: Optional[float] = None) -> ParamVector:
        rng = np.random.default_rng(seed)
        d, h, k = self.feature_dim, self.hidden, self.num_classes
        w1 = rng.standard_normal((d, h)) * (scale or 1.0 / np.sqrt(d))
        w2 = rng.standard_normal((h, k)) * (scale or 1.0 / np.sqrt(h))
        return ParamVector(np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(k)]))

    def _unpack(self, theta):
        d, h, k = self.feature_dim, self.hidden, self.num_classes
        i = 0
        w1 = theta[i:i + d * h].reshape(d, h); i += d * h
        b1 = theta[i:i + h]; i += h
        w2 = theta[i:i + h * k].reshape(h, k); i += h * k
        return w1, b1, w2, theta[i:i + k]

    def logits(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        w1, b1, w2, b2 = self._unpack(theta)
        return np.tanh(x @ w1 + b1) @ w2 + b2

    def loss_and_grad(self, theta: np.ndarray, batch: MiniBatch) -> Tuple[float, np.ndarray]:
        x, y = batch.features, batch.labels
        n = y.size
        w1, b1, w2, b2 = self._unpack(theta)
        hid = np.tanh(x @ w1 + b1)
        logp = _log_softmax(hid @ w2 + b2)
        loss = -logp[np.arange(n), y].mean()
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0
        delta /= n
        gw2 = hid.T @ delta
        gb2 = delta.sum(axis=0)
        dh = (delta @ w2.T) * (1.0 - hid ** 2)
        gw1 = x.T @ dh
        gb1 = dh.sum(axis=0)
        return float(loss), np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])

    def activation_floats(self, batch_size: int) -> int:
        return batch_size * (2 * self.hidden + 2 * self.num_classes)


def build_model(kind: str, feature_dim: int, num_classes: int, hidden: int = 16):
    if kind == "softmax":
        return SoftmaxRegression(feature_dim, num_classes)
    if kind == "mlp":
        return TanhMLP(feature_dim, num_classes, hidden)
    raise ConfigError(f"unknown model kind {kind!r} (softmax|mlp)")


def _check_shapes(model, params: ParamVector, batch: MiniBatch) -> None:
    if batch.features.shape[1] != model.feature_dim:
        raise ShapeError(
            f"batch has {batch.features.shape[1]} features, model expects {model.feature_dim}"
        )
    if len(params) != model.num_params:
        raise ShapeError(f"param vector has {len(params)} entries, model needs {model.num_params}")
    if batch.labels.min() < 0 or batch.labels.max() >= model.num_classes:
        raise ShapeError("labels out of range for the model's class count")


def compute_gradient(model, params: ParamVector, batch: MiniBatch, worker_id: int = 0) -> GradientUpdate:
    """Mean cross-entropy gradient of ``model`` over ``batch`` at ``params``."""
    _check_shapes(model, params, batch)
    if not np.all(np.isfinite(params.values)):
        raise NumericError("parameters contain non-finite entries")
    _, grad = model.loss_and_grad(params.values, batch)
    return GradientUpdate(grad, worker_id, batch.size, params.version)


def loss(model, params: ParamVector, batch: MiniBatch) -> float:
    _check_shapes(model, params, batch)
    return model.loss_and_grad(params.values, batch)[0]


def accuracy(model, params: ParamVector, batch: MiniBatch) -> float:
    pred = model.logits(params.values, batch.features).argmax(axis=1)
    return float((pred == batch.labels).mean())


def apply_update(params: ParamVector, grad: np.ndarray, lr: float) -> ParamVector:
    """Plain SGD step ``theta - lr * grad``; bumps the version by one."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape:
        raise ShapeError(f"gradient shape {g.shape} != params shape {params.values.shape}")
    if not lr > 0:
        raise NumericError(f"learning rate must be positive, got {lr}")
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient contains non-finite entries; update rejected")
    out = params.values - lr * g
    if not np.all(np.isfinite(out)):
        raise NumericError("update produced non-finite parameters")
    return ParamVector(out, params.version + 1)
