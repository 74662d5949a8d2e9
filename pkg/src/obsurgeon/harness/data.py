"""Seeded synthetic classification tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]


@dataclass
class DataSpec:
    seed: int = 0
    n_samples: int = 4096
    n_features: int = 32
    n_classes: int = 8
    spread: float = 1.0
    centers_per_class: int = 3
    holdout: float = 0.25
    kind: str = "gaussian_mixture"


def make_dataset(spec: DataSpec, dtype="float32") -> Dataset:
    if spec.kind == "gaussian_mixture":
        x, y = gaussian_mixture(spec)
    elif spec.kind == "teacher":
        x, y = teacher_labels(spec)
    else:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    n_test = int(round(spec.holdout * spec.n_samples))
    x = x.astype(dtype)
    return Dataset(x[n_test:], y[n_test:], x[:n_test], y[:n_test])


def gaussian_mixture(spec: DataSpec):
    """Each class is a mixture of ``centers_per_class`` isotropic Gaussians."""
    rng = np.random.default_rng(spec.seed)
    n_centers = spec.n_classes * spec.centers_per_class
    centers = rng.normal(0.0, 1.0, size=(n_centers, spec.n_features)) * np.sqrt(spec.n_features) / 2
    owner = np.arange(n_centers) % spec.n_classes
    pick = rng.integers(0, n_centers, size=spec.n_samples)
    x = centers[pick] + spec.spread * rng.normal(size=(spec.n_samples, spec.n_features))
    x /= np.sqrt(spec.n_features) / 2
    return x, owner[pick]


def teacher_labels(spec: DataSpec):
    """Labels from the argmax of a random two-layer tanh network."""
    rng = np.random.default_rng(spec.seed)
    x = rng.normal(size=(spec.n_samples, spec.n_features))
    W1 = rng.normal(size=(spec.n_features, 4 * spec.n_features)) / np.sqrt(spec.n_features)
    W2 = rng.normal(size=(4 * spec.n_features, spec.n_classes)) / np.sqrt(4 * spec.n_features)
    logits = np.tanh(x @ W1) @ W2 + spec.spread * 0.1 * rng.normal(size=(spec.n_samples, spec.n_classes))
    return x, logits.argmax(axis=1)
