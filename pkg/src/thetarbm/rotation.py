"""Pixel-index rotation of flattened square images.

Angles are in degrees, counter-clockwise positive as the image is displayed
(row 0 at the top). The rotation centre is ``((side-1)/2, (side-1)/2)``.

A rotation table maps every target pixel to the source pixel it copies from,
or to ``SENTINEL`` when the source falls outside the image (zero fill). For
multiples of 90 degrees the table is a true permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SENTINEL = -1

EXACT = "exact"
NEAREST = "nn"
MODES = (EXACT, NEAREST)


class RotationModeError(ValueError):
    """Requested angle cannot be represented in the support set's mode."""


class ShapeError(ValueError):
    pass


def _norm_angle(theta: float) -> float:
    a = float(theta) % 360.0
    # fold float noise such as 359.99999999999994 back onto 0
    if math.isclose(a, 360.0, abs_tol=1e-9) or math.isclose(a, 0.0, abs_tol=1e-9):
        return 0.0
    r = round(a)
    return float(r) if math.isclose(a, r, abs_tol=1e-9) else a


def is_right_angle(theta: float) -> bool:
    return _norm_angle(theta) % 90.0 == 0.0


def build_table(theta: float, side: int) -> np.ndarray:
    """Inverse-mapping table for a rotation by ``theta`` degrees.

    Entry ``t`` is the flat index of the source pixel for target pixel ``t``.
    Right angles use exact integer trigonometry so the table is a bijection.
    """
    theta = _norm_angle(theta)
    if theta % 90.0 == 0.0:
        quarter = int(theta // 90) % 4
        cos, sin = ((1, 0), (0, 1), (-1, 0), (0, -1))[quarter]
    else:
        rad = math.radians(theta)
        cos, sin = math.cos(rad), math.sin(rad)
    centre = (side - 1) / 2.0
    r, c = np.indices((side, side), dtype=np.float64)
    # y axis points up so that positive angles turn counter-clockwise on screen
    xt = c - centre
    yt = centre - r
    xs = cos * xt + sin * yt
    ys = -sin * xt + cos * yt
    cs = np.rint(xs + centre).astype(np.int64)
    rs = np.rint(centre - ys).astype(np.int64)
    inside = (rs >= 0) & (rs < side) & (cs >= 0) & (cs < side)
    table = np.where(inside, rs * side + cs, SENTINEL)
    return table.reshape(-1)


@dataclass(frozen=True)
class SupportSet:
    """Ordered rotation angles plus cached rotation tables.

    ``perm_tables`` is keyed by the normalised angle in ``[0, 360)``. Tables for
    every pairwise difference of member angles are built up front; in
    nearest-neighbour mode other angles are built on first use.
    """

    angles: tuple
    side: int
    mode: str = EXACT
    perm_tables: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def size(self) -> int:
        return len(self.angles)

    def table(self, theta: float) -> np.ndarray:
        key = _norm_angle(theta)
        tab = self.perm_tables.get(key)
        if tab is None:
            if self.mode == EXACT and not is_right_angle(key):
                raise RotationModeError(f"{theta} degrees is not a multiple of 90 in exact mode")
            tab = build_table(key, self.side)
            tab.setflags(write=False)
            self.perm_tables[key] = tab
        return tab

    def with_mode(self, mode: str) -> "SupportSet":
        """Same angles in another mode; right-angle tables are shared (identical in both)."""
        if mode == self.mode:
            return self
        if mode == EXACT:
            return build_support_set(self.angles, self.side, EXACT)
        return SupportSet(self.angles, self.side, mode, dict(self.perm_tables))

    def difference(self, target: int, source: int) -> float:
        """Angle that carries slice ``source`` onto slice ``target``."""
        return _norm_angle(self.angles[target] - self.angles[source])

    def nearest_index(self, angle) -> np.ndarray:
        """Index of the nearest member angle by circular distance; ties go low."""
        angle = np.asarray(angle, dtype=np.float64)
        phis = np.asarray(self.angles)
        d = np.abs((angle[..., None] - phis + 180.0) % 360.0 - 180.0)
        return np.argmin(np.round(d, 9), axis=-1)


def build_support_set(angles, side: int, mode: str = EXACT) -> SupportSet:
    if mode not in MODES:
        raise ValueError(f"unknown rotation mode {mode!r}")
    angles = tuple(float(a) for a in angles)
    if not angles:
        raise ValueError("support set needs at least one angle")
    if any(a < 0 or a >= 360 for a in angles):
        raise ValueError("support angles must lie in [0, 360)")
    if any(b <= a for a, b in zip(angles, angles[1:])):
        raise ValueError("support angles must be strictly increasing")
    diffs = sorted({_norm_angle(b - a) for a in angles for b in angles})
    if mode == EXACT:
        bad = [d for d in diffs if not is_right_angle(d)]
        if bad:
            raise RotationModeError(f"exact mode needs 90-degree differences, got {bad[0]}")
    tables = {}
    for d in diffs:
        tab = build_table(d, side)
        tab.setflags(write=False)
        tables[d] = tab
    return SupportSet(angles, int(side), mode, tables)


def _apply(table: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = a[..., np.maximum(table, 0)]
    if np.any(table == SENTINEL):
        out[..., table == SENTINEL] = 0.0
    return out


def rotate_rows(a: np.ndarray, theta: float, support: SupportSet) -> np.ndarray:
    """Rotate every row of ``a`` (each a flattened image) by ``theta`` degrees.

    Works on any array whose last axis has ``side**2`` entries.
    """
    a = np.asarray(a)
    if a.shape[-1] != support.side ** 2:
        raise ShapeError(f"rows have {a.shape[-1]} entries, expected {support.side ** 2}")
    return _apply(support.table(theta), a)


def adjoint_rows(a: np.ndarray, theta: float, support: SupportSet) -> np.ndarray:
    """Transpose of ``rotate_rows``: each output pixel sums the entries it was copied to.

    For exact (permutation) tables this equals rotating by ``-theta``.
    """
    a = np.asarray(a)
    n = support.side ** 2
    if a.shape[-1] != n:
        raise ShapeError(f"rows have {a.shape[-1]} entries, expected {n}")
    table = support.table(theta)
    ok = table != SENTINEL
    flat = a.reshape(-1, n)
    out = np.zeros_like(flat)
    # scatter-add columns; bincount per row keeps the summation order fixed
    for i, row in enumerate(flat):
        out[i] = np.bincount(table[ok], weights=row[ok], minlength=n)
    return out.reshape(a.shape)


def rotate_column(x: np.ndarray, theta: float, support: SupportSet) -> np.ndarray:
    """Rotate a single flattened image (column-vector convention)."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ShapeError("rotate_column expects a 1-D vector")
    return rotate_rows(x, theta, support)


def inverse_table(table: np.ndarray) -> np.ndarray:
    """Inverse of a bijective table."""
    if np.any(table == SENTINEL):
        raise RotationModeError("table with zero-filled pixels has no inverse")
    inv = np.empty_like(table)
    inv[table] = np.arange(len(table))
    return inv


def rotation_matrix(table: np.ndarray) -> np.ndarray:
    """Dense 0/1 matrix ``T`` with ``(T x)[t] = x[table[t]]``."""
    n = len(table)
    t = np.zeros((n, n))
    ok = table != SENTINEL
    t[np.arange(n)[ok], table[ok]] = 1.0
    return t
