"""Datasets: a deterministic synthetic texture task and CIFAR binary loaders.

The synthetic task is built so the whole pipeline runs in minutes with no
downloads: each class is an oriented sinusoidal grating with random phase,
amplitude, and additive noise. Uniform random phase makes the per-class
pixel mean identically zero, so no linear classifier on raw pixels can
separate the classes, while orientation is easy for a small conv net.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass, field

import numpy as np

from .netmodel import ConfigurationError

__all__ = ["DatasetHandle", "make_synthetic_dataset", "load_cifar"]


@dataclass
class DatasetHandle:
    """Named dataset with disjoint train/test splits of (image, label) pairs."""

    name: str
    train_x: np.ndarray  # (N, C, H, W) float32
    train_y: np.ndarray  # (N,) int64
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    augment: bool = False

    def __post_init__(self):
        for y in (self.train_y, self.test_y):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ConfigurationError("labels out of range")
        if self.train_x.shape[0] != self.train_y.shape[0]:
            raise ConfigurationError("train images/labels length mismatch")
        if self.test_x.shape[0] != self.test_y.shape[0]:
            raise ConfigurationError("test images/labels length mismatch")

    @property
    def image_channels(self) -> int:
        return int(self.train_x.shape[1])

    @property
    def image_size(self) -> int:
        return int(self.train_x.shape[2])

    @property
    def train_size(self) -> int:
        return int(self.train_x.shape[0])


def make_synthetic_dataset(classes: int, samples: int, image_size: int, seed: int, *,
                           channels: int = 3, noise: float = 0.25,
                           train_fraction: float = 0.8) -> DatasetHandle:
    """Deterministic oriented-grating classification task, split 80/20.

    Class c gets orientation pi*c/classes. Phase ~ U[0, 2pi), amplitude
    ~ U[0.6, 1.4), per-channel gain jitter ~ U[0.8, 1.2), pixel noise
    N(0, noise^2). Identical seeds give identical pixel data.
    """
    if classes < 2:
        raise ConfigurationError("need at least 2 classes")
    if samples < classes:
        raise ConfigurationError("need at least one sample per class")

    rng = np.random.default_rng(seed)
    grid = np.arange(image_size, dtype=np.float64) / image_size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    freq = 3.0

    labels = (np.arange(samples) % classes).astype(np.int64)
    images = np.empty((samples, channels, image_size, image_size), dtype=np.float32)
    for i in range(samples):
        theta = np.pi * labels[i] / classes
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.6, 1.4)
        pattern = amp * np.sin(
            2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase
        )
        gains = rng.uniform(0.8, 1.2, size=channels)
        img = gains[:, None, None] * pattern[None, :, :]
        img += noise * rng.standard_normal(img.shape)
        images[i] = img.astype(np.float32)

    perm = rng.permutation(samples)
    images, labels = images[perm], labels[perm]
    n_train = int(round(samples * train_fraction))
    return DatasetHandle(
        name=f"synthetic{classes}",
        train_x=images[:n_train],
        train_y=labels[:n_train],
        test_x=images[n_train:],
        test_y=labels[n_train:],
        num_classes=classes,
    )


# ---------------------------------------------------------------------------
# CIFAR loaders (published binary layouts; never downloaded here)

def _normalize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = train.mean(axis=(0, 2, 3), keepdims=True)
    std = train.std(axis=(0, 2, 3), keepdims=True) + 1e-7
    return ((train - mean) / std).astype(np.float32), ((test - mean) / std).astype(np.float32)


def _read_cifar_bin(path: str, label_bytes: int) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    record = label_bytes + 3072
    if raw.size % record != 0:
        raise ConfigurationError(f"{path}: size is not a multiple of the record length")
    raw = raw.reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)  # fine label is the last label byte
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _read_cifar_pickle(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        batch = pickle.load(f, encoding="bytes")
    labels = batch.get(b"labels", batch.get(b"fine_labels"))
    images = batch[b"data"].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, np.asarray(labels, dtype=np.int64)


def load_cifar(path: str, name: str = "cifar10", augment: bool = True) -> DatasetHandle:
    """Load CIFAR-10/100 from a directory in the published binary or pickle layout."""
    if name == "cifar10":
        train_files = [f"data_batch_{i}" for i in range(1, 6)]
        test_files = ["test_batch"]
        classes, label_bytes = 10, 1
    elif name == "cifar100":
        train_files, test_files = ["train"], ["test"]
        classes, label_bytes = 100, 2
    else:
        raise ConfigurationError(f"unknown dataset {name!r}")

    def read_all(names):
        xs, ys = [], []
        for n in names:
            bin_path = os.path.join(path, n + ".bin")
            if os.path.exists(bin_path):
                x, y = _read_cifar_bin(bin_path, label_bytes)
            elif os.path.exists(os.path.join(path, n)):
                x, y = _read_cifar_pickle(os.path.join(path, n))
            else:
                raise ConfigurationError(f"missing dataset file {n}(.bin) under {path}")
            xs.append(x)
            ys.append(y)
        return np.concatenate(xs), np.concatenate(ys)

    train_x, train_y = read_all(train_files)
    test_x, test_y = read_all(test_files)
    train_x, test_x = _normalize(train_x, test_x)
    return DatasetHandle(
        name=name,
        train_x=train_x,
        train_y=train_y,
        test_x=test_x,
        test_y=test_y,
        num_classes=classes,
        augment=augment,
    )


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop (after zero padding) plus horizontal flip, per sample."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    tops = rng.integers(0, 2 * pad + 1, size=n)
    lefts = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
