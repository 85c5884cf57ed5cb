"""Synthetic image classification task standing in for a real dataset.

Each class is a Gaussian blob with its own position (one per quadrant for
the default four classes), colour and size, over Gaussian pixel noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 2000
    n_test: int = 400
    image_size: int = 32
    channels: int = 3
    n_classes: int = 4
    noise: float = 0.1
    amplitude: float = 1.0
    center_jitter: float = 3.0
    sigma_jitter: float = 0.5


@dataclass
class SyntheticDataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    spec: SyntheticSpec
    seed: int


def class_layout(spec: SyntheticSpec, c: int):
    """(center_row, center_col, colour[C], sigma) of class ``c``."""
    S = spec.image_size
    angle = 2.0 * math.pi * c / spec.n_classes + math.pi / 4
    radius = S * math.sqrt(2.0) / 4
    cy = S / 2 - 0.5 - radius * math.sin(angle)
    cx = S / 2 - 0.5 + radius * math.cos(angle)
    colour = np.full(spec.channels, 0.2)
    colour[c % spec.channels] = 1.0
    if c >= spec.channels:
        colour[(c + 1) % spec.channels] = 1.0
    sigma = 2.5 + c % 3
    return cy, cx, colour, sigma


def _render(spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    S = spec.image_size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    images = np.empty((len(labels), spec.channels, S, S))
    for i, c in enumerate(labels):
        cy, cx, colour, sigma = class_layout(spec, int(c))
        cy += rng.uniform(-spec.center_jitter, spec.center_jitter)
        cx += rng.uniform(-spec.center_jitter, spec.center_jitter)
        sigma += rng.uniform(-spec.sigma_jitter, spec.sigma_jitter)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        images[i] = spec.amplitude * colour[:, None, None] * blob
        images[i] += rng.normal(0.0, spec.noise, size=(spec.channels, S, S))
    return images


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if n % k:
        raise ValueError(f"{n} samples cannot be split evenly over {k} classes")
    return rng.permutation(np.arange(n) % k)


def make_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> SyntheticDataset:
    rng = np.random.Generator(np.random.Philox(seed))
    train_labels = _balanced_labels(spec.n_train, spec.n_classes, rng)
    test_labels = _balanced_labels(spec.n_test, spec.n_classes, rng)
    train = _render(spec, train_labels, rng)
    test = _render(spec, test_labels, rng)
    return SyntheticDataset(train, train_labels, test, test_labels, spec, seed)
