"""Dataset loading (IDX / amat), subsampling and per-pixel standardization."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

UNASSIGNED = -1


class DataFormatError(ValueError):
    """Input file does not follow the expected on-disk layout."""


class DataConsistencyError(ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


@dataclass(frozen=True)
class ImageDataset:
    """Flattened square gray images with labels and orientation assignments.

    ``orientation_index`` holds ``UNASSIGNED`` (-1) until an orientation
    estimator fills it. ``orientation_angle`` keeps the raw estimated angle in
    degrees (NaN when unknown), which the invariance code uses to track the
    gating slice of rotated inputs.
    """

    images: np.ndarray
    labels: np.ndarray
    side: int
    orientation_index: np.ndarray = field(default=None)
    orientation_angle: np.ndarray = field(default=None)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 2:
            images = images.reshape(len(images), -1)
        n, v = images.shape
        if self.side * self.side != v:
            raise DataConsistencyError(f"side {self.side} does not match {v} pixels per image")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(labels) != n:
            raise DataConsistencyError(f"{n} images but {len(labels)} labels")
        if n and (labels.min() < 0 or labels.max() > 9):
            raise DataFormatError("labels must lie in 0..9")
        oi = self.orientation_index
        oi = np.full(n, UNASSIGNED, dtype=np.int64) if oi is None else np.asarray(oi, dtype=np.int64)
        oa = self.orientation_angle
        oa = np.full(n, np.nan) if oa is None else np.asarray(oa, dtype=np.float64)
        if len(oi) != n or len(oa) != n:
            raise DataConsistencyError("orientation arrays must have one entry per image")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "orientation_index", oi)
        object.__setattr__(self, "orientation_angle", oa)

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.images.shape[1]

    @property
    def has_orientation(self) -> bool:
        return len(self) > 0 and bool(np.all(self.orientation_index >= 0))

    def take(self, idx) -> "ImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageDataset(
            self.images[idx], self.labels[idx], self.side,
            self.orientation_index[idx], self.orientation_angle[idx],
        )

    def with_images(self, images: np.ndarray) -> "ImageDataset":
        return replace(self, images=images)

    def with_orientation(self, index, angle=None) -> "ImageDataset":
        return replace(self, orientation_index=index,
                       orientation_angle=self.orientation_angle if angle is None else angle)


def _read_be32(buf: bytes, offset: int) -> int:
    return struct.unpack_from(">I", buf, offset)[0]


def _read_idx(path, expected_magic: int) -> tuple[list[int], bytes]:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    magic = _read_be32(buf, 0)
    if magic != expected_magic:
        raise DataFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = [_read_be32(buf, 4 + 4 * i) for i in range(ndim)]
    payload = buf[header:]
    if len(payload) != math.prod(dims):
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, header says {math.prod(dims)}")
    return dims, payload


def load_idx(images_path, labels_path) -> ImageDataset:
    """Read an mnist image/label IDX pair; pixels are scaled to [0, 1]."""
    dims, payload = _read_idx(images_path, IDX_IMAGE_MAGIC)
    n, rows, cols = dims
    if rows != cols:
        raise DataFormatError(f"{images_path}: images are {rows}x{cols}, expected square")
    (n_labels,), lab = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if n_labels != n:
        raise DataConsistencyError(f"{n} images but {n_labels} labels")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return ImageDataset(images, labels, rows)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray, side: int) -> None:
    """Write uint8 IDX files; float images in [0, 1] are rescaled to 0..255."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    n = images.shape[0]
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, side, side))
        f.write(images.reshape(n, side * side).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_amat(path, side: int | None = None) -> ImageDataset:
    """Read whitespace-separated rows of V pixel values followed by a label.

    The label column is stored as a float in the published files (``7.0``);
    it must be integral. Pixel values are clamped to [0, 1].
    """
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataFormatError(f"{path}:{lineno}: {len(rows[-1])} values, expected {len(rows[0])}")
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.asarray(rows)
    v = arr.shape[1] - 1
    if side is None:
        side = math.isqrt(v)
    if side * side != v:
        raise DataFormatError(f"{path}: rows have {arr.shape[1]} values, expected {side * side + 1}")
    raw = arr[:, -1]
    labels = np.rint(raw)
    if np.any(np.abs(raw - labels) > 1e-6):
        raise DataFormatError(f"{path}: non-integral label")
    return ImageDataset(np.clip(arr[:, :-1], 0.0, 1.0), labels.astype(np.int64), side)


def write_amat(path, ds: ImageDataset) -> None:
    with open(path, "w") as f:
        for img, lab in zip(ds.images, ds.labels):
            f.write(" ".join(f"{x:.9g}" for x in img))
            f.write(f" {float(lab):.1f}\n")


def subsample(ds: ImageDataset, n: int, seed: int) -> ImageDataset:
    """Draw ``n`` images without replacement; the same seed gives the same rows."""
    if n < 0 or n > len(ds):
        raise ValueError(f"cannot draw {n} of {len(ds)} images")
    idx = np.random.default_rng(seed).permutation(len(ds))[:n]
    return ds.take(idx)


@dataclass
class NormalizationStats:
    """Per-pixel mean/std fitted on a training split.

    For ``per-orientation-group`` scope the arrays are ``(G, V)`` with one row
    per orientation index; otherwise ``(1, V)``. ``per_pixel_std`` holds the
    raw standard deviation; zero entries are replaced by 1 when dividing.
    """

    per_pixel_mean: np.ndarray
    per_pixel_std: np.ndarray
    group_scope: str = "whole-dataset"

    def divisor(self) -> np.ndarray:
        return np.where(self.per_pixel_std > 0, self.per_pixel_std, 1.0)

    def _rows(self, ds: ImageDataset) -> np.ndarray:
        if self.group_scope == "whole-dataset":
            return np.zeros(len(ds), dtype=np.int64)
        if not ds.has_orientation and len(ds):
            raise ValueError("per-orientation-group normalization needs assigned orientations")
        return ds.orientation_index

    def apply(self, ds: ImageDataset) -> ImageDataset:
        g = self._rows(ds)
        return ds.with_images((ds.images - self.per_pixel_mean[g]) / self.divisor()[g])

    def invert(self, ds: ImageDataset) -> ImageDataset:
        g = self._rows(ds)
        return ds.with_images(ds.images * self.divisor()[g] + self.per_pixel_mean[g])

    def save(self, path) -> None:
        np.savez(path, mean=self.per_pixel_mean, std=self.per_pixel_std,
                 scope=np.array(self.group_scope))

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        with np.load(path) as z:
            return cls(z["mean"], z["std"], str(z["scope"]))

    def to_json(self) -> str:
        return json.dumps({"scope": self.group_scope,
                           "mean": self.per_pixel_mean.tolist(),
                           "std": self.per_pixel_std.tolist()})


GROUP_SCOPES = ("whole-dataset", "per-orientation-group")


def fit_normalization(train: ImageDataset, scope: str = "whole-dataset") -> NormalizationStats:
    if scope not in GROUP_SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    x = train.images
    mean = x.mean(axis=0, keepdims=True)
    std = x.std(axis=0, keepdims=True)
    if scope == "whole-dataset":
        return NormalizationStats(mean, std, scope)
    if not train.has_orientation:
        raise ValueError("per-orientation-group normalization needs assigned orientations")
    n_groups = int(train.orientation_index.max()) + 1
    means = np.repeat(mean, n_groups, axis=0)
    stds = np.repeat(std, n_groups, axis=0)
    for g in range(n_groups):
        rows = x[train.orientation_index == g]
        if len(rows) < 2:
            log.warning("orientation group %d has %d samples; using whole-dataset stats", g, len(rows))
            continue
        means[g] = rows.mean(axis=0)
        stds[g] = rows.std(axis=0)
    return NormalizationStats(means, stds, scope)


def normalize(train: ImageDataset, test: ImageDataset, scope: str = "whole-dataset"):
    """Standardize ``train`` per pixel and apply the same transform to ``test``.

    Returns ``(train_normalized, test_normalized, stats)``.
    """
    stats = fit_normalization(train, scope)
    if scope == "per-orientation-group" and len(test):
        if not test.has_orientation:
            raise ValueError("per-orientation-group normalization needs assigned orientations")
        n_groups = stats.per_pixel_mean.shape[0]
        if test.orientation_index.max() >= n_groups:
            # groups never seen in training fall back to the pooled statistics
            extra = int(test.orientation_index.max()) + 1 - n_groups
            pooled = fit_normalization(train)
            stats = NormalizationStats(
                np.vstack([stats.per_pixel_mean, np.repeat(pooled.per_pixel_mean, extra, 0)]),
                np.vstack([stats.per_pixel_std, np.repeat(pooled.per_pixel_std, extra, 0)]),
                scope,
            )
    return stats.apply(train), stats.apply(test), stats
