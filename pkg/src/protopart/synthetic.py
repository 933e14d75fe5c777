"""Procedurally generated shape images for desk-scale experiments.

Five classes (square, disk, triangle, plus, ring) are drawn at random
positions, sizes and colours over a noisy background, so a classifier has to
look at the shape rather than at colour or location.
"""

import numpy as np

from .data import Dataset

SHAPE_CLASSES = ("square", "disk", "triangle", "plus", "ring")


def _mask(kind, size, yy, xx, cy, cx, radius):
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= radius * 0.8) & (np.abs(dx) <= radius * 0.8)
    if kind == "disk":
        return dy**2 + dx**2 <= radius**2
    if kind == "triangle":
        # apex up; half-width grows linearly from the apex to the base
        top, bottom = cy - radius, cy + radius
        half = (yy - top) / (bottom - top) * radius
        return (yy >= top) & (yy <= bottom) & (np.abs(dx) <= half)
    if kind == "plus":
        arm = max(1.0, radius * 0.3)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    if kind == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= radius**2) & (r2 >= (radius * 0.55) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def render_shape(kind, rng, size=32):
    """One uint8 RGB image of ``kind``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    radius = rng.uniform(size * 0.2, size * 0.3)
    margin = radius + 1
    cy, cx = rng.uniform(margin, size - margin, size=2)
    background = rng.uniform(0.0, 0.35, size=3)
    image = np.broadcast_to(background, (size, size, 3)).copy()
    image += rng.normal(0.0, 0.05, size=image.shape)
    colour = rng.uniform(0.55, 1.0, size=3)
    image[_mask(kind, size, yy, xx, cy, cx, radius)] = colour
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def make_shapes(n_per_class, size=32, seed=0, split="train", classes=SHAPE_CLASSES):
    """Balanced dataset with ``n_per_class`` images of each shape, shuffled."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, kind in enumerate(classes):
        for _ in range(n_per_class):
            images.append(render_shape(kind, rng, size))
            labels.append(label)
    order = rng.permutation(len(images))
    images = np.stack(images)[order].astype(np.float64) / 255.0
    return Dataset(images, np.asarray(labels)[order], tuple(classes), split)
