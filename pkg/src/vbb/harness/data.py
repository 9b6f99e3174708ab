"""Synthetic image tasks with labels computable from the pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vbb.errors import ConfigError

TASKS = {"quadrant": 4, "stripes": 2}


@dataclass(frozen=True)
class SyntheticDataset:
    task: str
    images: np.ndarray
    labels: np.ndarray

    @property
    def num_classes(self) -> int:
        return TASKS[self.task]

    def __len__(self) -> int:
        return len(self.labels)


def quadrant_images(n: int, size: int, rng: np.random.Generator, noise: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """One Gaussian blob per image; the label is the quadrant holding its centre.

    Quadrants are numbered row-major: 0 top-left, 1 top-right, 2 bottom-left,
    3 bottom-right. Blob centres sit on a 3x3 lattice of offsets inside the
    quadrant and every (offset, quadrant) pair is used equally often, so the
    images of different classes are exact cyclic translates of each other
    (the blob wraps around the image edges). Without
    pixel noise a model blind to absolute position cannot beat 1/4 accuracy,
    not even by memorising the training set.
    """
    half = size // 2
    margin = max(1, size // 8)
    sigma = max(1.0, size / 16)
    offsets = np.linspace(margin, half - margin, 3)
    cells = [(oy, ox) for oy in offsets for ox in offsets]
    i = rng.permutation(n)
    labels = i % 4
    cell = (i // 4) % len(cells)
    oy = np.array([cells[c][0] for c in cell])
    ox = np.array([cells[c][1] for c in cell])
    cy = oy + half * (labels // 2)
    cx = ox + half * (labels % 2)
    yy, xx = np.mgrid[0:size, 0:size]
    # periodic distance: classes are exact cyclic shifts of each other
    dy = np.abs(yy[None] - cy[:, None, None])
    dx = np.abs(xx[None] - cx[:, None, None])
    dy = np.minimum(dy, size - dy)
    dx = np.minimum(dx, size - dx)
    blob = np.exp(-(dy**2 + dx**2) / (2 * sigma**2))
    images = np.repeat(blob[:, None], 3, axis=1)
    if noise:
        images += noise * rng.standard_normal(images.shape)
    return images, labels


def stripe_images(n: int, size: int, rng: np.random.Generator, noise: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Sinusoidal stripes; label 0 = horizontal, 1 = vertical."""
    labels = rng.integers(0, 2, n)
    period = rng.uniform(3.0, size / 2, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    coord = np.arange(size, dtype=np.float64)
    wave = np.sin(2 * np.pi * coord[None] / period[:, None] + phase[:, None])
    images = np.where(
        labels[:, None, None] == 0,
        wave[:, :, None] * np.ones(size)[None, None, :],
        wave[:, None, :] * np.ones(size)[None, :, None],
    )
    images = np.repeat(images[:, None], 3, axis=1)
    images += noise * rng.standard_normal(images.shape)
    return images, labels


def make_dataset(task: str, samples: int, image_size: int, seed: int, noise: float = 0.0) -> SyntheticDataset:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    if samples < 1:
        raise ConfigError(f"samples must be >= 1, got {samples}")
    rng = np.random.default_rng(seed)
    make = quadrant_images if task == "quadrant" else stripe_images
    images, labels = make(samples, image_size, rng, noise)
    return SyntheticDataset(task, images, labels.astype(np.intp))
