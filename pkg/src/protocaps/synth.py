"""Procedural digit images, written as real IDX files.

A stroke-font renderer: each digit class is a fixed set of line segments,
rasterized with a random affine distortion (scale, rotation, shear,
translation), random stroke thickness, brightness and pixel noise. The
result is a 10-class, 28x28 grayscale classification task in the MNIST
container format, for environments where the real dataset files cannot be
downloaded. Fully deterministic given the seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import write_idx

# Segment endpoints in a unit box, x right, y down.
GLYPHS = {
    0: [((0.25, 0.12), (0.75, 0.12)), ((0.75, 0.12), (0.75, 0.88)),
        ((0.75, 0.88), (0.25, 0.88)), ((0.25, 0.88), (0.25, 0.12))],
    1: [((0.35, 0.28), (0.55, 0.12)), ((0.55, 0.12), (0.55, 0.88)),
        ((0.35, 0.88), (0.75, 0.88))],
    2: [((0.25, 0.22), (0.5, 0.1)), ((0.5, 0.1), (0.75, 0.22)),
        ((0.75, 0.22), (0.75, 0.42)), ((0.75, 0.42), (0.25, 0.88)),
        ((0.25, 0.88), (0.78, 0.88))],
    3: [((0.25, 0.12), (0.75, 0.12)), ((0.75, 0.12), (0.75, 0.88)),
        ((0.35, 0.5), (0.75, 0.5)), ((0.75, 0.88), (0.25, 0.88))],
    4: [((0.3, 0.1), (0.22, 0.55)), ((0.22, 0.55), (0.8, 0.55)),
        ((0.65, 0.1), (0.65, 0.9))],
    5: [((0.75, 0.12), (0.27, 0.12)), ((0.27, 0.12), (0.25, 0.48)),
        ((0.25, 0.48), (0.72, 0.48)), ((0.72, 0.48), (0.75, 0.88)),
        ((0.75, 0.88), (0.25, 0.88))],
    6: [((0.7, 0.1), (0.32, 0.38)), ((0.32, 0.38), (0.25, 0.6)),
        ((0.25, 0.52), (0.75, 0.52)), ((0.75, 0.52), (0.75, 0.88)),
        ((0.75, 0.88), (0.25, 0.88)), ((0.25, 0.88), (0.25, 0.52))],
    7: [((0.22, 0.12), (0.78, 0.12)), ((0.78, 0.12), (0.42, 0.9)),
        ((0.35, 0.5), (0.68, 0.5))],
    8: [((0.25, 0.12), (0.75, 0.12)), ((0.75, 0.12), (0.75, 0.88)),
        ((0.75, 0.88), (0.25, 0.88)), ((0.25, 0.88), (0.25, 0.12)),
        ((0.25, 0.5), (0.75, 0.5))],
    9: [((0.25, 0.1), (0.75, 0.1)), ((0.75, 0.1), (0.75, 0.48)),
        ((0.75, 0.48), (0.25, 0.48)), ((0.25, 0.48), (0.25, 0.1)),
        ((0.75, 0.48), (0.6, 0.9))],
}


def _segment_distances(points, a, b):
    """Distance from each point [p, 2] to segment a-b."""
    ab = b - a
    denom = float(ab @ ab) or 1.0
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.sqrt(((points - closest) ** 2).sum(axis=1))


def render_digit(digit, rng, size=28):
    """One distorted digit image as float32 in [0, 1]."""
    segs = GLYPHS[digit]
    scale = rng.uniform(0.62, 0.95) * size
    theta = rng.uniform(-0.30, 0.30)
    shear = rng.uniform(-0.18, 0.18)
    cx = size / 2 + rng.uniform(-2.5, 2.5)
    cy = size / 2 + rng.uniform(-2.5, 2.5)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    aff = rot @ np.array([[1.0, shear], [0.0, 1.0]]) * scale

    ys, xs = np.mgrid[0:size, 0:size]
    points = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    dist = np.full(size * size, np.inf)
    for p0, p1 in segs:
        a = aff @ (np.array(p0) - 0.5) + (cx, cy)
        b = aff @ (np.array(p1) - 0.5) + (cx, cy)
        dist = np.minimum(dist, _segment_distances(points, a, b))
    thickness = rng.uniform(0.9, 1.8)
    img = np.clip((thickness - dist) / 0.9, 0.0, 1.0)
    img *= rng.uniform(0.72, 1.0)
    img += rng.normal(0.0, 0.035, size=img.shape)
    return np.clip(img, 0.0, 1.0).reshape(size, size).astype(np.float32)


def make_digits(count, seed, size=28):
    """(images_u8 [count, size, size], labels [count]) — balanced classes."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=count)
    images = np.empty((count, size, size), dtype=np.uint8)
    for i, digit in enumerate(labels):
        images[i] = np.round(render_digit(int(digit), rng, size) *
                             255).astype(np.uint8)
    return images, labels.astype(np.int64)


def write_digit_idx(out_dir, train_count=10000, test_count=10000, seed=0,
                    size=28):
    """Write train/test IDX pairs; returns the four file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_images": out / "train-images-idx3-ubyte",
        "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "t10k-images-idx3-ubyte",
        "test_labels": out / "t10k-labels-idx1-ubyte",
    }
    train_images, train_labels = make_digits(train_count, seed, size)
    test_images, test_labels = make_digits(test_count, seed + 1, size)
    write_idx(paths["train_images"], paths["train_labels"], train_images,
              train_labels)
    write_idx(paths["test_images"], paths["test_labels"], test_images,
              test_labels)
    return paths
