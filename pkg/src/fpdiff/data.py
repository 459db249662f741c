"""Toy datasets and the image file codec.

All datasets emit float32 arrays normalized to [-1, 1] per dimension.
2D sets return (points, labels) where labels may be None; the mixture's
labels are mode indices, usable for class-conditional training.
"""

from __future__ import annotations

import math
import os
import re

import numpy as np

from .errors import UsageError


def gaussian_mixture(rng, n, modes=8, spread=0.05, radius=0.75):
    """Equal-weight isotropic Gaussians centered on a circle."""
    if modes < 1:
        raise UsageError("modes must be >= 1")
    if not 0 < radius <= 1.0 - 3 * spread:
        raise UsageError("radius leaves no room for the mode spread")
    which = rng.integers(0, modes, size=n)
    ang = 2.0 * math.pi * which / modes
    centers = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    pts = centers + spread * rng.standard_normal((n, 2))
    return pts.astype(np.float32), which.astype(np.int64)


def mixture_centers(modes=8, radius=0.75):
    ang = 2.0 * math.pi * np.arange(modes) / modes
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def assign_modes(points, modes=8, radius=0.75):
    """Nearest mixture center per point."""
    centers = mixture_centers(modes, radius)
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def checkerboard(rng, n):
    """Uniform mass on the 8 even-parity cells of a 4x4 grid over [-1, 1]^2."""
    cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    pick = rng.integers(0, len(cells), size=n)
    offs = rng.random((n, 2))
    ij = np.array(cells, dtype=np.float64)[pick]
    pts = (ij + offs) / 2.0 - 1.0
    return pts.astype(np.float32), None


def spiral(rng, n, turns=1.75, spread=0.02):
    """Single Archimedean arm, radius growing with angle, plus jitter."""
    u = rng.random(n)
    theta = 2.0 * math.pi * turns * np.sqrt(u)
    r = 0.9 * theta / (2.0 * math.pi * turns)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    pts += spread * rng.standard_normal((n, 2))
    return np.clip(pts, -1.0, 1.0).astype(np.float32), None


def write_pgm(path, image):
    """Store one [-1, 1] grayscale array as binary PGM (P5, maxval 255)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise UsageError(f"expected a 2-d image, got shape {img.shape}")
    levels = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def read_pgm(path):
    """Inverse of write_pgm; returns float32 in [-1, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise UsageError(f"{path} is not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise UsageError(f"{path}: only maxval 255 is supported")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=m.end())
    if pixels.size < w * h:
        raise UsageError(f"{path}: truncated pixel data")
    pixels = pixels[:w * h]
    img = pixels.reshape(h, w).astype(np.float32) / 127.5 - 1.0
    return img


def load_image_dir(path, size):
    """All .pgm files under ``path``, sorted by name, as one (N, S, S) array."""
    if size not in (8, 16):
        raise UsageError("image size must be 8 or 16")
    if not os.path.isdir(path):
        raise UsageError(f"image directory {path!r} does not exist")
    names = sorted(f for f in os.listdir(path) if f.endswith(".pgm"))
    if not names:
        raise UsageError(f"no .pgm files in {path!r}")
    images = []
    for name in names:
        img = read_pgm(os.path.join(path, name))
        if img.shape != (size, size):
            raise UsageError(f"{name}: expected {size}x{size}, got {img.shape}")
        images.append(img)
    return np.stack(images)


class DatasetSampler:
    """Uniform over a fixed image set, or a fresh 2D draw per batch."""

    def __init__(self, name, seed, **kwargs):
        self.name = name
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        if name == "gaussian-mixture":
            self.modes = int(kwargs.pop("modes", 8))
            self.spread = float(kwargs.pop("spread", 0.05))
        elif name == "image-dir":
            self.images = load_image_dir(kwargs.pop("path"),
                                         int(kwargs.pop("size", 8)))
        elif name not in ("checkerboard", "spiral"):
            raise UsageError(f"unknown dataset {name!r}")
        if kwargs:
            raise UsageError(f"unexpected dataset options {sorted(kwargs)}")

    def draw(self, n):
        """Returns (batch, labels-or-None)."""
        if self.name == "gaussian-mixture":
            return gaussian_mixture(self.rng, n, self.modes, self.spread)
        if self.name == "checkerboard":
            return checkerboard(self.rng, n)
        if self.name == "spiral":
            return spiral(self.rng, n)
        idx = self.rng.integers(0, len(self.images), size=n)
        return self.images[idx], None
