"""Toy architectures and a deterministic minibatch trainer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import data as datasets
from .nn import Conv2D, Dense, Flatten, MaxPool, Network, ReLU, accuracy, loss_and_grads

log = logging.getLogger(__name__)


class NonConvergenceError(RuntimeError):
    def __init__(self, model, final_accuracy, required):
        super().__init__(f"training reached accuracy {final_accuracy:.4f} < required {required:.4f}")
        self.model = model
        self.final_accuracy = final_accuracy


PRESETS = {
    # 2-feature blobs, ~50 parameters
    "mlp-blobs": dict(
        input_shape=(2,),
        layers=[Dense(2, 16), ReLU(), Dense(16, 2)],
        dataset="blobs",
        dataset_kwargs=dict(n_per_split=200, n_features=2, separation=6.0),
    ),
    # 102 parameters; small enough for a dense Hessian
    "cnn-tiny": dict(
        input_shape=(6, 6, 2),
        layers=[Conv2D(2, 3, 3), ReLU(), MaxPool(2), Flatten(), Dense(12, 4)],
        dataset="prototype_images",
        dataset_kwargs=dict(n_per_split=(400, 200, 200), shape=(6, 6, 2), num_classes=4, noise=2.0),
    ),
    # the bundled CNN used by the selection and sweep experiments (6320 parameters)
    "cnn-small": dict(
        input_shape=(8, 8, 3),
        layers=[
            Conv2D(3, 16, 3, padding=1), ReLU(), MaxPool(2),
            Conv2D(16, 32, 3, padding=1), ReLU(), MaxPool(2),
            Flatten(), Dense(128, 10),
        ],
        dataset="prototype_images",
        dataset_kwargs=dict(n_per_split=(2000, 500, 500), shape=(8, 8, 3), num_classes=10, noise=1.5),
        weight_decay=1e-3,
    ),
}


@dataclass
class TrainConfig:
    preset: str = "cnn-small"
    epochs: int = 30
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    data_seed: int = 0
    min_accuracy: float = 0.0
    weight_decay: float | None = None  # None: the preset's value
    dataset_kwargs: dict = field(default_factory=dict)


def make_dataset(preset: str, seed=0, **overrides) -> dict[str, datasets.Dataset]:
    spec = PRESETS[preset]
    kwargs = {**spec["dataset_kwargs"], **overrides}
    return getattr(datasets, spec["dataset"])(seed=seed, **kwargs)


def init_network(preset: str, seed=0) -> Network:
    """He-normal initialisation of a preset architecture."""
    spec = PRESETS[preset]
    rng = np.random.default_rng(seed)
    weights = []
    for layer in spec["layers"]:
        if layer.kind in ("conv2d", "dense"):
            shape = layer.weight_shape
            fan_in = int(np.prod(shape[:-1]))
            weights.append(rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape))
    return Network(spec["layers"], weights, spec["input_shape"])


def train_toy(cfg: TrainConfig, splits=None) -> Network:
    """Train a preset with SGD + momentum; bit-identical for a fixed seed."""
    if cfg.preset not in PRESETS:
        raise KeyError(f"unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}")
    splits = splits or make_dataset(cfg.preset, cfg.data_seed, **cfg.dataset_kwargs)
    train = splits["train"]
    net = init_network(cfg.preset, cfg.seed)
    if cfg.epochs == 0:
        return net

    decay = np.float32(cfg.weight_decay if cfg.weight_decay is not None else PRESETS[cfg.preset].get("weight_decay", 0.0))
    rng = np.random.default_rng(cfg.seed + 1)
    ws = [w.astype(np.float32) for w in net.weights]
    vel = [np.zeros_like(w) for w in ws]
    n = len(train)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * epoch / cfg.epochs))
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = loss_and_grads(net, train.inputs[idx], train.labels[idx], ws, dtype=np.float32)
            for w, v, g in zip(ws, vel, grads):
                if decay:
                    g = g + decay * w
                v *= cfg.momentum
                v -= np.float32(lr) * g
                w += v
        log.debug("epoch %d done", epoch)

    net = net.with_weights(ws)
    check = splits.get("evaluation", train)
    acc = accuracy(net, check)
    if acc < cfg.min_accuracy:
        raise NonConvergenceError(net, acc, cfg.min_accuracy)
    return net
