"""Deterministic handwritten-digit stand-in corpus.

Renders 28x28 grayscale digits from stroke templates with seeded per-example
distortion (affine jitter, control-point wobble, stroke thickness, pixel
noise), and writes them as standard IDX files so they flow through the same
loader as the real thing.  Distortion magnitude varies per example, which
gives each class a spread of easy and hard instances - the property the
desk-scale experiments rely on.

Use this when no real digit corpus is on disk; the files it writes are
byte-deterministic in (counts, seed).
"""

from __future__ import annotations

import os

import numpy as np

from .data import MNIST_FILES, write_idx_images, write_idx_labels
from .seeding import stream


def _bezier(p0, p1, p2, n=40):
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2))
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _line(p0, p1, n=30):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) * np.asarray(p0, dtype=np.float64) + t * np.asarray(p1, dtype=np.float64)


def _ellipse(cx, cy, rx, ry, t0=0.0, t1=2 * np.pi, n=60):
    t = np.linspace(t0, t1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


# Stroke templates in unit coordinates, x right, y down.
_GLYPHS = {
    0: [_ellipse(0.5, 0.5, 0.24, 0.34)],
    1: [_line((0.36, 0.28), (0.54, 0.13)), _line((0.54, 0.13), (0.54, 0.86))],
    2: [
        _bezier((0.27, 0.32), (0.5, 0.02), (0.72, 0.32)),
        _line((0.72, 0.32), (0.28, 0.84)),
        _line((0.28, 0.84), (0.74, 0.84)),
    ],
    3: [
        _bezier((0.3, 0.2), (0.78, 0.12), (0.48, 0.47)),
        _bezier((0.48, 0.47), (0.85, 0.62), (0.3, 0.85)),
    ],
    4: [
        _line((0.6, 0.12), (0.25, 0.62)),
        _line((0.25, 0.62), (0.78, 0.62)),
        _line((0.62, 0.36), (0.62, 0.9)),
    ],
    5: [
        _line((0.7, 0.13), (0.33, 0.13)),
        _line((0.33, 0.13), (0.31, 0.46)),
        _bezier((0.31, 0.46), (0.85, 0.42), (0.56, 0.84)),
        _line((0.56, 0.84), (0.3, 0.8)),
    ],
    6: [
        _bezier((0.64, 0.12), (0.32, 0.25), (0.34, 0.62)),
        _ellipse(0.49, 0.67, 0.16, 0.18),
    ],
    7: [_line((0.26, 0.15), (0.74, 0.15)), _line((0.74, 0.15), (0.42, 0.88))],
    8: [_ellipse(0.5, 0.31, 0.17, 0.17), _ellipse(0.5, 0.68, 0.2, 0.19)],
    9: [_ellipse(0.52, 0.33, 0.18, 0.18), _bezier((0.7, 0.33), (0.72, 0.6), (0.55, 0.88))],
}

_GRID = np.stack(
    np.meshgrid(np.arange(28, dtype=np.float64), np.arange(28, dtype=np.float64), indexing="ij"),
    axis=-1,
).reshape(-1, 2)  # (784, 2) as (row, col)


def render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    """One 28x28 uint8 image of `digit`, distorted by draws from `rng`."""
    # difficulty scales every distortion; the tail makes genuinely hard examples
    difficulty = rng.uniform(0.35, 1.0) ** 0.7 + rng.exponential(0.12)
    angle = rng.normal(0.0, 0.16) * difficulty
    scale = 1.0 + rng.normal(0.0, 0.09) * difficulty
    shear = rng.normal(0.0, 0.12) * difficulty
    shift = rng.normal(0.0, 1.1, size=2) * difficulty
    thickness = rng.uniform(0.55, 0.95)
    ink = rng.uniform(0.72, 1.0)

    pts = np.concatenate([
        s + rng.normal(0.0, 0.016 * difficulty, size=(1, 2)) for s in _GLYPHS[digit]
    ])
    pts = pts + rng.normal(0.0, 0.006 * difficulty, size=pts.shape)

    c, s = np.cos(angle), np.sin(angle)
    mat = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
    centered = (pts - 0.5) @ mat.T
    xy = (centered + 0.5) * 22.0 + 3.0  # margin inside the 28px canvas
    xy = xy + shift

    # distance field from each pixel to the nearest stroke sample (row=y, col=x)
    pix = _GRID
    pts_rc = np.stack([xy[:, 1], xy[:, 0]], axis=1)
    d2 = ((pix[:, None, :] - pts_rc[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    img = ink * np.exp(-d2 / (2.0 * thickness**2))
    img += rng.normal(0.0, 0.012, size=img.shape)
    img = np.clip(img, 0.0, 1.0).reshape(28, 28)
    return np.round(img * 255.0).astype(np.uint8)


def make_corpus(count: int, seed: int, offset: int = 0):
    """`count` images with balanced shuffled labels; deterministic in (count, seed, offset).

    `offset` shifts the per-example streams so that disjoint blocks (train vs
    validation) never share draws.
    """
    label_rng = stream(seed, "labels", offset)
    labels = np.tile(np.arange(10), count // 10 + 1)[:count].astype(np.uint8)
    label_rng.shuffle(labels)
    images = np.empty((count, 28, 28), dtype=np.uint8)
    for i in range(count):
        images[i] = render_digit(int(labels[i]), stream(seed, "example", offset + i))
    return images, labels


def write_corpus(directory, train_count: int = 12000, val_count: int = 10000, seed: int = 0):
    """Write a train/validation IDX corpus under `directory` using the usual file names."""
    os.makedirs(directory, exist_ok=True)
    train_images, train_labels = make_corpus(train_count, seed, offset=0)
    val_images, val_labels = make_corpus(val_count, seed, offset=train_count)
    write_idx_images(os.path.join(directory, MNIST_FILES["train_images"]), train_images)
    write_idx_labels(os.path.join(directory, MNIST_FILES["train_labels"]), train_labels)
    write_idx_images(os.path.join(directory, MNIST_FILES["test_images"]), val_images)
    write_idx_labels(os.path.join(directory, MNIST_FILES["test_labels"]), val_labels)
    return directory
