"""Synthetic datasets.

All generators are deterministic given ``seed`` and place 2-D data inside the
latent box ``[-1/2, 1/2]^2`` so grid-centre initialisation starts close to
the data.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyDatasetError

KINDS = ("gaussian-blobs", "mixture-of-lines", "mixture-of-circles", "micro-bars")


@dataclass(frozen=True)
class Dataset:
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    kind: str = "custom"
    image_shape: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] == 0:
            raise EmptyDatasetError()
        if not np.all(np.isfinite(pts)):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


def as_dataset(data):
    if isinstance(data, Dataset):
        return data
    arr = np.asarray(data, dtype=float)
    if arr.size == 0:
        raise EmptyDatasetError()
    return Dataset(arr)


def gaussian_blobs(n=60, centers=None, num_blobs=3, spread=0.02, seed=0):
    """Isotropic Gaussian blobs; points are dealt round-robin to the centres."""
    rng = np.random.default_rng(seed)
    if centers is None:
        angles = 2 * np.pi * np.arange(num_blobs) / num_blobs + np.pi / 2
        centers = 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    centers = np.asarray(centers, dtype=float)
    labels = np.arange(n) % len(centers)
    pts = centers[labels] + spread * rng.standard_normal((n, centers.shape[1]))
    return Dataset(pts, labels, "gaussian-blobs", meta={"centers": centers.tolist()})


def mixture_of_lines(n=200, num_lines=3, noise=0.01, seed=0):
    """Points spread uniformly along random segments inside ``[-0.4, 0.4]^2``."""
    rng = np.random.default_rng(seed)
    starts = rng.uniform(-0.4, 0.4, size=(num_lines, 2))
    ends = rng.uniform(-0.4, 0.4, size=(num_lines, 2))
    labels = np.arange(n) % num_lines
    t = rng.uniform(0.0, 1.0, size=n)[:, None]
    pts = starts[labels] + t * (ends[labels] - starts[labels])
    pts += noise * rng.standard_normal(pts.shape)
    return Dataset(pts, labels, "mixture-of-lines")


def mixture_of_circles(n=200, num_circles=2, noise=0.01, seed=0):
    rng = np.random.default_rng(seed)
    radii = rng.uniform(0.08, 0.2, size=num_circles)
    centers = rng.uniform(-0.25, 0.25, size=(num_circles, 2))
    labels = np.arange(n) % num_circles
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    pts = centers[labels] + radii[labels, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    pts += noise * rng.standard_normal(pts.shape)
    return Dataset(pts, labels, "mixture-of-circles")


def micro_bars(n=200, side=8, noise=0.02, seed=0):
    """Small images, each with one horizontal and one vertical bar.

    Bar positions are drawn from the central rows/columns ``2..side-3`` so
    that every 6x6 window (stride 2) of an 8x8 image crosses the vertical bar;
    no such patch is ever flat. Bar intensities vary in ``[0.7, 1.0]``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = 2, side - 3
    rows = rng.integers(lo, hi + 1, size=n)
    cols = rng.integers(lo, hi + 1, size=n)
    hval = rng.uniform(0.7, 1.0, size=n)
    vval = rng.uniform(0.7, 1.0, size=n)
    imgs = np.zeros((n, side, side))
    idx = np.arange(n)
    imgs[idx, rows, :] = hval[:, None]
    imgs[idx, :, cols] = np.maximum(imgs[idx, :, cols], vval[:, None])
    imgs += noise * rng.standard_normal(imgs.shape)
    labels = rows * side + cols
    return Dataset(imgs.reshape(n, side * side), labels, "micro-bars", image_shape=(side, side))


def make_dataset(kind, n, seed, **kwargs):
    makers = {
        "gaussian-blobs": gaussian_blobs,
        "mixture-of-lines": mixture_of_lines,
        "mixture-of-circles": mixture_of_circles,
        "micro-bars": micro_bars,
    }
    if kind not in makers:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return makers[kind](n=n, seed=seed, **kwargs)
