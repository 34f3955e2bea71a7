"""Datasets: synthetic oriented gratings and the CIFAR-100 binary format.

The synthetic generator draws one sinusoidal grating per sample whose
orientation, spatial frequency, and phase-jitter range are class
properties, with per-sample random phase and additive pixel noise.
Random phase makes raw pixels nearly useless to a linear classifier
while conv features separate the classes easily.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    """Raised when an on-disk dataset does not match its format."""


@dataclass
class Dataset:
    """Images as float32 NCHW in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError(
                f"need NCHW images with one label each, got images "
                f"{self.images.shape} and {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx])


def concat_datasets(datasets) -> Dataset:
    datasets = list(datasets)
    return Dataset(np.concatenate([d.images for d in datasets]),
                   np.concatenate([d.labels for d in datasets]))


_GOLDEN = 0.6180339887498949


def gen_synthetic(classes: int, per_class: int, size: int = 32,
                  seed: int = 0, noise: float = 0.05) -> Dataset:
    """Oriented sinusoidal gratings, ``per_class`` samples per class.

    Class c uses orientation pi*c/classes, a spatial frequency cycling
    through 2/3/4 periods per image, a class base phase, and a
    class-specific phase-jitter amplitude; every sample adds fresh
    Gaussian pixel noise.  Channels see fixed phase offsets so the
    image is genuinely 3-channel.  Deterministic for a given seed.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    coords = (np.arange(size) + 0.5) / size
    uu, vv = np.meshgrid(coords, coords, indexing="ij")
    channel_phase = np.array([0.0, 0.7, 1.4], dtype=np.float64)
    images = np.empty((classes * per_class, 3, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    row = 0
    for c in range(classes):
        theta = np.pi * c / classes
        freq = 2.0 + (c % 3)
        base_phase = 2 * np.pi * ((c * _GOLDEN) % 1.0)
        jitter = (np.pi / 2) * (1.0 + c / classes)
        proj = uu * np.cos(theta) + vv * np.sin(theta)
        for _ in range(per_class):
            phase = base_phase + rng.uniform(-jitter, jitter)
            angle = 2 * np.pi * freq * proj + phase
            img = 0.5 + 0.35 * np.sin(angle[None, :, :]
                                      + channel_phase[:, None, None])
            img = img + rng.normal(0.0, noise, size=img.shape)
            images[row] = np.clip(img, 0.0, 1.0)
            row += 1
    return Dataset(images, labels)


_CIFAR_RECORD = 3074  # coarse label + fine label + 3 * 32 * 32 pixels


def load_cifar100_binary(path) -> Dataset:
    """Load CIFAR-100 records (binary version) with fine labels.

    Each record is one coarse-label byte, one fine-label byte, and 3072
    pixel bytes as three 32x32 channel planes in row-major order.
    Pixels are scaled to [0, 1].
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: {len(raw)} bytes is not a whole number of "
            f"{_CIFAR_RECORD}-byte records")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 1].astype(np.int64)
    images = records[:, 2:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels)


def save_npz(dataset: Dataset, path) -> None:
    np.savez(path, images=dataset.images, labels=dataset.labels)


def load_npz(path) -> Dataset:
    with np.load(path) as archive:
        if "images" not in archive or "labels" not in archive:
            raise FormatError(f"{path}: missing images/labels arrays")
        return Dataset(archive["images"], archive["labels"])
