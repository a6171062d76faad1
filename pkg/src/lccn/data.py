"""Seeded synthetic image classification data for desk-scale training.

Each class gets a fixed template: an oriented grating plus a Gaussian blob
at a class-specific position, with per-channel contrast variation.  Samples
are the class template under a random amplitude plus Gaussian pixel noise.
Regenerating with the same configuration is bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import DTYPE


@dataclass
class ToyDataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    config: dict

    @property
    def num_classes(self) -> int:
        return int(self.config["num_classes"])

    @property
    def image_shape(self) -> tuple:
        return tuple(self.train_images.shape[1:])


def make_toy_dataset(
    num_classes: int = 4,
    size: int = 8,
    channels: int = 3,
    n_train: int = 256,
    n_val: int = 64,
    noise: float = 0.3,
    seed: int = 0,
) -> ToyDataset:
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")

    templates = np.zeros((num_classes, size, size, channels), dtype=np.float64)
    for j in range(num_classes):
        theta = np.pi * j / num_classes
        freq = 2.0 * np.pi * (1.0 + (j % 2)) / size
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
        cx, cy = rng.uniform(size * 0.25, size * 0.75, size=2)
        blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * (size / 4.0) ** 2))
        contrast = 0.6 + 0.8 * rng.random(channels)
        sign = np.where(np.arange(channels) % 2 == (j % 2), 1.0, -1.0)
        templates[j] = (wave + 1.5 * blob)[:, :, None] * (contrast * sign)

    def batch(n):
        labels = np.arange(n) % num_classes
        labels = labels[rng.permutation(n)]
        amps = 1.0 + 0.2 * rng.standard_normal(n)
        images = templates[labels] * amps[:, None, None, None]
        images += noise * rng.standard_normal(images.shape)
        return images.astype(DTYPE), labels.astype(np.int64)

    train_images, train_labels = batch(n_train)
    val_images, val_labels = batch(n_val)
    config = {
        "kind": "toy",
        "num_classes": num_classes,
        "size": size,
        "channels": channels,
        "n_train": n_train,
        "n_val": n_val,
        "noise": noise,
        "seed": seed,
    }
    return ToyDataset(train_images, train_labels, val_images, val_labels, config)


def dataset_from_config(cfg: dict) -> ToyDataset:
    cfg = dict(cfg)
    kind = cfg.pop("kind", "toy")
    if kind != "toy":
        raise ConfigError(f"unknown dataset kind {kind!r}")
    allowed = {"num_classes", "size", "channels", "n_train", "n_val", "noise", "seed"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown dataset options: {sorted(unknown)}")
    return make_toy_dataset(**cfg)


def load_dataset(path) -> ToyDataset:
    with open(path) as fh:
        return dataset_from_config(json.load(fh))
