"""Procedural leaf images for offline smoke tests and demos.

Each class draws a green elliptical leaf on a pale background with rotation,
scale and colour jitter, then adds class-specific lesions:

* ``scab``: many small dark olive blotches
* ``black_rot``: a few large brown rings with dark centres
* ``cedar_rust``: bright orange spots with a red rim
* ``healthy``: no lesions

These are stand-ins with an easy decision boundary, not a model of any real
disease.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

CLASSES = ("black_rot", "cedar_rust", "healthy", "scab")


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return (x + 0.5) / size * 2 - 1, (y + 0.5) / size * 2 - 1


def _disc(x, y, cx, cy, r):
    return (x - cx) ** 2 + (y - cy) ** 2 <= r * r


def leaf_image(kind: str, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """One ``[size, size, 3]`` uint8 image of the given class."""
    if kind not in CLASSES:
        raise ValueError(f"unknown synthetic class {kind!r}; expected one of {CLASSES}")
    x, y = _grid(size)
    theta = rng.uniform(0, np.pi)
    a, b = rng.uniform(0.7, 0.9), rng.uniform(0.4, 0.55)
    cx, cy = rng.uniform(-0.08, 0.08, size=2)
    u = (x - cx) * np.cos(theta) + (y - cy) * np.sin(theta)
    v = -(x - cx) * np.sin(theta) + (y - cy) * np.cos(theta)
    leaf = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    img = np.empty((size, size, 3))
    img[:] = rng.uniform(0.78, 0.92) + rng.normal(0, 0.02, size=3)
    green = np.array([0.22, 0.55, 0.18]) + rng.normal(0, 0.03, size=3)
    shade = 1.0 - 0.15 * np.abs(v) / b          # darker towards the rim
    img[leaf] = green * shade[leaf, None]
    img[leaf & (np.abs(v) < 0.02)] = green * 1.25   # midrib

    def spots(n, rmin, rmax, colour, rim=None):
        for _ in range(n):
            su, sv = rng.uniform(-0.8, 0.8) * a, rng.uniform(-0.7, 0.7) * b
            px = cx + su * np.cos(theta) - sv * np.sin(theta)
            py = cy + su * np.sin(theta) + sv * np.cos(theta)
            r = rng.uniform(rmin, rmax)
            if rim is not None:
                img[leaf & _disc(x, y, px, py, r * 1.35)] = rim
            img[leaf & _disc(x, y, px, py, r)] = colour

    if kind == "scab":
        spots(rng.integers(10, 18), 0.03, 0.07, np.array([0.25, 0.27, 0.12]))
    elif kind == "black_rot":
        spots(rng.integers(2, 4), 0.12, 0.18, np.array([0.18, 0.08, 0.04]),
              rim=np.array([0.55, 0.35, 0.15]))
    elif kind == "cedar_rust":
        spots(rng.integers(5, 10), 0.05, 0.09, np.array([0.98, 0.62, 0.05]),
              rim=np.array([0.75, 0.15, 0.05]))
    img += rng.normal(0, 0.02, size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def write_dataset(root, per_class: int | Sequence[int] = 16, size: int = 64, seed: int = 0,
                  classes: Sequence[str] = CLASSES) -> Path:
    """Write ``root/<class>/<class>_NNNN.png`` images and return ``root``."""
    root = Path(root)
    counts = [per_class] * len(classes) if isinstance(per_class, int) else list(per_class)
    rng = np.random.default_rng(seed)
    for name, n in zip(classes, counts):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            Image.fromarray(leaf_image(name, rng, size)).save(d / f"{name}_{i:04d}.png")
    return root
