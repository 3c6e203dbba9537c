"""Dominant-orientation estimation from a gradient-orientation histogram."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ImageDataset
from .rotation import SupportSet

DEFAULT_BINS = 36


@dataclass(frozen=True)
class OrientationEstimate:
    angle: float
    index: int
    histogram: np.ndarray
    flat: bool = False


@dataclass(frozen=True)
class PerturbationSpec:
    n: int
    p: float
    seed: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")


def gradient_histograms(images: np.ndarray, side: int, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Magnitude-weighted orientation histograms, one row per image.

    Gradients are central differences on interior pixels. ``gx`` grows to the
    right and ``gy`` grows upwards, so angles follow the counter-clockwise
    convention used by the rotation tables.
    """
    imgs = np.asarray(images, dtype=np.float64).reshape(-1, side, side)
    gx = (imgs[:, 1:-1, 2:] - imgs[:, 1:-1, :-2]) / 2.0
    gy = (imgs[:, :-2, 1:-1] - imgs[:, 2:, 1:-1]) / 2.0
    mag = np.hypot(gx, gy).reshape(len(imgs), -1)
    ang = np.degrees(np.arctan2(gy, gx)).reshape(len(imgs), -1) % 360.0
    width = 360.0 / bins
    # centred bins: bin b covers [b*w - w/2, b*w + w/2)
    idx = np.floor((ang + width / 2.0) / width).astype(np.int64) % bins
    hist = np.zeros((len(imgs), bins))
    rows = np.repeat(np.arange(len(imgs)), idx.shape[1])
    np.add.at(hist, (rows, idx.reshape(-1)), mag.reshape(-1))
    return hist


def _dominant(hist: np.ndarray, bins: int):
    width = 360.0 / bins
    flat = hist.max(axis=1) <= 0.0
    best = np.argmax(hist, axis=1)  # first maximum wins ties
    angle = np.where(flat, 0.0, best * width)
    return angle, flat


def estimate_orientation(image: np.ndarray, side: int, bins: int = DEFAULT_BINS,
                         support: SupportSet | None = None) -> OrientationEstimate:
    """Angle of the heaviest histogram bin (its centre), in [0, 360).

    A constant image has no gradient; it is reported at 0 degrees with
    ``flat=True``.
    """
    image = np.asarray(image)
    if image.size != side * side:
        raise ValueError(f"image has {image.size} pixels, expected {side * side}")
    if support is not None and bins < support.size:
        raise ValueError("need at least as many bins as support angles")
    hist = gradient_histograms(image[None], side, bins)
    angle, flat = _dominant(hist, bins)
    index = int(support.nearest_index(angle[0])) if support is not None else 0
    return OrientationEstimate(float(angle[0]), index, hist[0], bool(flat[0]))


def estimate_angles(images: np.ndarray, side: int, bins: int = DEFAULT_BINS):
    hist = gradient_histograms(images, side, bins)
    return _dominant(hist, bins)


def assign_orientations(ds: ImageDataset, support: SupportSet, bins: int = DEFAULT_BINS,
                        chunk: int = 2000) -> ImageDataset:
    """Fill ``orientation_index`` with the nearest support angle of each image."""
    if bins < support.size:
        raise ValueError("need at least as many bins as support angles")
    if ds.side != support.side:
        raise ValueError("dataset and support set disagree on image side")
    angles = np.empty(len(ds))
    for start in range(0, len(ds), chunk):
        a, _ = estimate_angles(ds.images[start:start + chunk], ds.side, bins)
        angles[start:start + chunk] = a
    index = support.nearest_index(angles) if len(ds) else np.zeros(0, dtype=np.int64)
    return ds.with_orientation(index, angles)


def canonical_orientation(ds: ImageDataset, support: SupportSet) -> ImageDataset:
    """Mark every image as lying at support index 0 (unrotated data)."""
    return ds.with_orientation(np.zeros(len(ds), dtype=np.int64),
                               np.full(len(ds), support.angles[0]))


def perturb_indices(ds: ImageDataset, spec: PerturbationSpec, n_slices: int) -> ImageDataset:
    """Shift each orientation index by ``+-eps`` with ``eps ~ Binomial(n, p)``.

    Each image draws from its own stream seeded by ``(seed, image index)`` so
    results do not depend on processing order. The shift wraps around the
    circular support set.
    """
    if not ds.has_orientation and len(ds):
        raise ValueError("orientation_index must be assigned before perturbing")
    if spec.n == 0 or spec.p == 0.0:
        return ds
    eps = np.empty(len(ds), dtype=np.int64)
    sign = np.empty(len(ds), dtype=np.int64)
    for i in range(len(ds)):
        rng = np.random.Generator(np.random.Philox(key=[spec.seed, i]))
        eps[i] = rng.binomial(spec.n, spec.p)
        sign[i] = 1 if rng.random() < 0.5 else -1
    index = (ds.orientation_index + sign * eps) % n_slices
    # the raw angle no longer describes the (deliberately wrong) slice
    return ds.with_orientation(index, np.full(len(ds), np.nan))
