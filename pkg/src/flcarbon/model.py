"""Toy-scale learning substrate: Gaussian-blob data, a flat-vector MLP and local SGD.

Model parameters are always handled as a single flat float64 vector so that the
compression and protocol layers never need to know about layer shapes.
"""

from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when local optimization produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    n_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.n_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_dims)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n_samples, input_dim) matching labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])


@dataclass
class DatasetPartition(Dataset):
    owner: int = 0


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    local_epochs: int = 1

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be positive, got {self.local_epochs}")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def generate_synthetic_dataset(
    n_classes: int,
    input_dim: int,
    samples_per_class: int,
    class_separation: float,
    noise_sigma: float,
    seed: int | Sequence[int],
    val_fraction: float = 0.2,
) -> tuple[Dataset, Dataset]:
    """Gaussian blobs: one mean per class drawn from N(0, separation^2 I), isotropic noise.

    Returns ``(train, validation)``; the validation split takes ``val_fraction`` of
    each class so that both splits stay balanced.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if input_dim < 1 or samples_per_class < 1:
        raise ValueError("input_dim and samples_per_class must be positive")
    if noise_sigma <= 0:
        raise ValueError(f"noise_sigma must be positive, got {noise_sigma}")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")

    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_separation, size=(n_classes, input_dim))
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    features = means[labels] + rng.normal(0.0, noise_sigma, size=(labels.size, input_dim))

    n_val = int(round(val_fraction * samples_per_class))
    val_mask = np.zeros(labels.size, dtype=bool)
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        val_mask[rng.permutation(members)[:n_val]] = True

    train_idx = rng.permutation(np.flatnonzero(~val_mask))
    val_idx = np.flatnonzero(val_mask)
    return (
        Dataset(features[train_idx], labels[train_idx], n_classes),
        Dataset(features[val_idx], labels[val_idx], n_classes),
    )


def load_csv_dataset(path: str | Path, n_classes: int | None = None) -> Dataset:
    """Read a CSV with a header row, feature columns and an integer ``label`` column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file, header row required")
        if "label" not in header:
            raise ValueError(f"{path}: no 'label' column in header {header}")
        label_col = header.index("label")
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    labels = table[:, label_col]
    if not np.all(labels == np.round(labels)):
        raise ValueError(f"{path}: label column must hold integers")
    features = np.delete(table, label_col, axis=1)
    labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = max(int(labels.max()) + 1, 2)
    return Dataset(features, labels, n_classes)


def split_dataset(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_val = int(round(val_fraction * len(data)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    return (
        Dataset(data.features[train_idx], data.labels[train_idx], data.n_classes),
        Dataset(data.features[val_idx], data.labels[val_idx], data.n_classes),
    )


def partition_iid(dataset: Dataset, n_devices: int, seed: int | Sequence[int]) -> list[DatasetPartition]:
    """Random disjoint shards whose sizes differ by at most one; owners are 1..K."""
    if n_devices < 1:
        raise ValueError(f"device count must be >= 1, got {n_devices}")
    if len(dataset) < n_devices:
        raise ValueError(f"dataset has {len(dataset)} samples, fewer than {n_devices} devices")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [
        DatasetPartition(dataset.features[idx], dataset.labels[idx], dataset.n_classes, owner=k + 1)
        for k, idx in enumerate(np.array_split(order, n_devices))
    ]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def init_params(arch: MlpArchitecture, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases, packed layer by layer as (W row-major, b)."""
    chunks = []
    for fan_in, fan_out in arch.layer_dims:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unpack(params: np.ndarray, arch: MlpArchitecture) -> list[tuple[np.ndarray, np.ndarray]]:
    if params.shape != (arch.n_params,):
        raise ValueError(f"parameter vector has shape {params.shape}, expected ({arch.n_params},)")
    layers = []
    offset = 0
    for fan_in, fan_out in arch.layer_dims:
        weight = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((weight, bias))
    return layers


def logits(params: np.ndarray, arch: MlpArchitecture, features: np.ndarray) -> np.ndarray:
    h = features
    layers = unpack(params, arch)
    for weight, bias in layers[:-1]:
        h = np.maximum(h @ weight + bias, 0.0)
    weight, bias = layers[-1]
    return h @ weight + bias


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(
    params: np.ndarray, arch: MlpArchitecture, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. ``params``."""
    layers = unpack(params, arch)
    activations = [features]
    h = features
    for weight, bias in layers[:-1]:
        h = np.maximum(h @ weight + bias, 0.0)
        activations.append(h)
    weight, bias = layers[-1]
    log_p = _log_softmax(h @ weight + bias)

    n = labels.shape[0]
    loss = -log_p[np.arange(n), labels].mean()

    delta = np.exp(log_p)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grads: list[np.ndarray] = []
    for layer in range(len(layers) - 1, -1, -1):
        weight, _ = layers[layer]
        a_in = activations[layer]
        grads.append(delta.sum(axis=0))
        grads.append((a_in.T @ delta).ravel())
        if layer > 0:
            delta = (delta @ weight.T) * (a_in > 0)
    grads.reverse()
    return float(loss), np.concatenate(grads)


def local_optimize(
    params: np.ndarray,
    arch: MlpArchitecture,
    partition: Dataset,
    config: OptimizerConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mini-batch SGD with momentum (velocity starts at zero); returns new parameters.

    Uses the ``v <- mu*v + g; w <- w - lr*v`` form. The batch size is clamped to
    the partition size and the trailing partial batch of each epoch is kept.
    """
    if len(partition) == 0:
        raise ValueError("cannot optimize on an empty partition")
    w = params.copy()
    if w.shape != (arch.n_params,):
        raise ValueError(f"parameter vector has shape {w.shape}, expected ({arch.n_params},)")
    velocity = np.zeros_like(w)
    batch = min(config.batch_size, len(partition))
    for epoch in range(config.local_epochs):
        order = rng.permutation(len(partition))
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = loss_and_grad(w, arch, partition.features[idx], partition.labels[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                owner = getattr(partition, "owner", "?")
                raise DivergenceError(
                    f"non-finite loss/gradient on device {owner}, epoch {epoch}, "
                    f"batch at offset {start} (loss={loss})"
                )
            velocity = config.momentum * velocity + grad
            w = w - config.learning_rate * velocity
    return w


def evaluate(params: np.ndarray, arch: MlpArchitecture, data: Dataset) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy (argmax ties go to the lowest class)."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    # a diverging model is reported as nan loss here; the optimizer raises on it
    with np.errstate(over="ignore", invalid="ignore"):
        log_p = _log_softmax(logits(params, arch, data.features))
    loss = -log_p[np.arange(len(data)), data.labels].mean()
    accuracy = np.mean(log_p.argmax(axis=1) == data.labels)
    return float(loss), float(accuracy)
