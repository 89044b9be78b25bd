"""Synthetic oriented-bar imagery for demos, smoke training and tests.

A bar with parameter ``theta`` is the stripe of pixels whose signed
distance ``(col - cx) * cos(theta) + (row - cy) * sin(theta)`` is small,
which is exactly the maximum-response locus of the Gabor kernel generated
with the same ``theta``.  That shared convention is what makes the
orientation-selectivity checks meaningful.
"""

from __future__ import annotations

import math

import numpy as np


def bar_mask(size: int, theta: float, width: float = 3.0,
             center: tuple[float, float] | None = None) -> np.ndarray:
    """Boolean mask of an oriented bar through ``center``."""
    cy, cx = center if center is not None else ((size - 1) / 2.0, (size - 1) / 2.0)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = (cols - cx) * math.cos(theta) + (rows - cy) * math.sin(theta)
    return np.abs(dist) <= width / 2.0


def bar_image(size: int = 48, theta: float = 0.0, width: float = 3.0,
              fg: float = 0.9, bg: float = 0.1,
              center: tuple[float, float] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One bright bar on a dark background plus its binary label."""
    mask = bar_mask(size, theta, width, center)
    image = np.where(mask, fg, bg).astype(np.float32)
    return image, mask.astype(np.uint8)


def bar_batch(thetas, size: int = 48, width: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Stack bar patches into (N, 1, size, size) images and (N, size, size) labels."""
    images, labels = [], []
    for theta in thetas:
        img, lab = bar_image(size=size, theta=theta, width=width)
        images.append(img[None])
        labels.append(lab)
    return np.stack(images), np.stack(labels)


def vessel_scene(size: int = 96, num_bars: int = 4, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """A full-frame synthetic scene: several bars over a smooth background.

    Returns an 8-bit grayscale image and its binary vessel label, sized for
    exercising tiled inference and the evaluation pipeline without any real
    fundus data.
    """
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    background = 70.0 + 40.0 * (rows + cols) / (2.0 * size)
    label = np.zeros((size, size), dtype=np.uint8)
    image = background.copy()
    for _ in range(num_bars):
        theta = float(rng.uniform(0.0, math.pi))
        cy = float(rng.uniform(size * 0.25, size * 0.75))
        cx = float(rng.uniform(size * 0.25, size * 0.75))
        width = float(rng.uniform(2.0, 4.0))
        mask = bar_mask(size, theta, width, center=(cy, cx))
        image[mask] = 200.0 + rng.uniform(-10.0, 10.0)
        label |= mask.astype(np.uint8)
    image += rng.normal(0.0, 2.0, size=image.shape)
    return np.clip(image, 0, 255).astype(np.uint8), label
