"""Datasets and the synthetic tasks used by the toy presets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPLITS = ("train", "calibration", "evaluation")


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "evaluation"

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if len(inputs) != len(labels):
            raise ValueError(f"{len(inputs)} inputs but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.split)


def blobs(n_per_split=200, n_features=2, separation=6.0, seed=0) -> dict[str, Dataset]:
    """Two Gaussian blobs on either side of a random hyperplane."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=n_features)
    direction /= np.linalg.norm(direction)
    out = {}
    for split in SPLITS:
        y = rng.integers(0, 2, size=n_per_split)
        x = rng.normal(size=(n_per_split, n_features))
        x += np.outer(np.where(y == 1, 0.5, -0.5) * separation, direction)
        out[split] = Dataset(x, y, 2, split)
    return out


def prototype_images(
    n_per_split=(2000, 500, 500),
    shape=(8, 8, 3),
    num_classes=10,
    noise=1.0,
    seed=0,
) -> dict[str, Dataset]:
    """Noisy copies of smooth per-class prototype images.

    Each prototype is a random field blurred with a 3x3 box filter, so classes
    differ in local structure that small convolutions can pick up.
    """
    rng = np.random.default_rng(seed)
    h, w, c = shape
    raw = rng.normal(size=(num_classes, h + 2, w + 2, c))
    protos = np.zeros((num_classes, h, w, c))
    for i in range(3):
        for j in range(3):
            protos += raw[:, i:i + h, j:j + w, :]
    protos /= protos.std(axis=(1, 2, 3), keepdims=True)
    out = {}
    for split, n in zip(SPLITS, n_per_split):
        y = rng.integers(0, num_classes, size=n)
        x = protos[y] + noise * rng.normal(size=(n, h, w, c))
        out[split] = Dataset(x, y, num_classes, split)
    return out
