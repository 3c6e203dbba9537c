"""Invariance score: variance of transform-averaged activations over raw variance."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import ImageDataset
from .orientation import DEFAULT_BINS, estimate_angles
from .rbm import ThetaRBM
from .rotation import NEAREST, SupportSet, _norm_angle, rotate_rows
from .trainer import encode

DEAD_VARIANCE = 1e-12

TRACKED = "tracked"
REESTIMATED = "reestimated"


@dataclass
class GammaReport:
    gamma: np.ndarray
    dead_mask: np.ndarray
    mean_gamma: float | None
    transform_set: tuple
    delta: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def all_dead(self) -> bool:
        return bool(self.dead_mask.all())

    @property
    def n_dead(self) -> int:
        return int(self.dead_mask.sum())

    def to_dict(self) -> dict:
        return {
            "mean_gamma": self.mean_gamma,
            "all_dead": self.all_dead,
            "dead_count": self.n_dead,
            "n_hidden": int(len(self.gamma)),
            "transform_set": list(self.transform_set),
            "delta": self.delta,
            "gamma": [None if d else float(g) for g, d in zip(self.gamma, self.dead_mask)],
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self) -> str:
        mean = "" if self.mean_gamma is None else f"{self.mean_gamma:.6f}"
        return f"{mean},{self.n_dead},{len(self.gamma)},{self.delta:g}"


def shifted_support(support: SupportSet | tuple, delta: float) -> tuple:
    """Every support angle shifted by ``delta`` degrees, wrapped into [0, 360)."""
    angles = support.angles if isinstance(support, SupportSet) else support
    return tuple(_norm_angle(a + delta) for a in angles)


def gamma_from_activations(h: np.ndarray, mu: np.ndarray, delta: float = 0.0,
                           transforms=()) -> GammaReport:
    """Score from raw activations ``h`` and transform means ``mu`` (both ``N x H``).

    Population variances; units whose raw variance is below ``DEAD_VARIANCE``
    are excluded from the mean. Values are not clipped to [0, 1].
    """
    var_h = np.var(h, axis=0)
    var_mu = np.var(mu, axis=0)
    dead = var_h < DEAD_VARIANCE
    gamma = np.where(dead, np.nan, var_mu / np.where(dead, 1.0, var_h))
    mean = None if dead.all() else float(np.mean(gamma[~dead]))
    return GammaReport(gamma, dead, mean, tuple(transforms), delta)


def _base_angles(ds: ImageDataset, support: SupportSet) -> np.ndarray:
    if not ds.has_orientation:
        return np.zeros(len(ds))
    phis = np.asarray(support.angles)[ds.orientation_index]
    return np.where(np.isfinite(ds.orientation_angle), ds.orientation_angle, phis)


def mean_activation(m: ThetaRBM, ds: ImageDataset, transforms, support: SupportSet,
                    kind: str = "theta", gate: str = TRACKED, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Hidden probabilities averaged over rotated copies of each image.

    With ``gate="tracked"`` the slice for a copy rotated by ``theta`` is the
    support angle nearest to the image's own orientation plus ``theta``;
    ``"reestimated"`` re-runs the orientation estimator on the rotated copy.
    """
    transforms = tuple(transforms)
    if not transforms:
        raise ValueError("need at least one transform")
    base = _base_angles(ds, support)
    # inputs may be turned by any angle even when the model's slices are exact
    free = support.with_mode(NEAREST)
    mu = np.zeros((len(ds), m.n_hidden))
    for theta in transforms:
        rotated = rotate_rows(ds.images, theta, free)
        if gate == TRACKED:
            angle = base + theta
        elif gate == REESTIMATED:
            angle, _ = estimate_angles(rotated, ds.side, bins)
        else:
            raise ValueError(f"unknown gating rule {gate!r}")
        r = support.nearest_index(angle % 360.0)
        mu += encode(m, kind, rotated, r, support)
    return mu / len(transforms)


def gamma_score(m: ThetaRBM, ds: ImageDataset, transforms, support: SupportSet,
                kind: str = "theta", gate: str = TRACKED, delta: float = 0.0) -> GammaReport:
    if len(ds) == 0:
        raise ValueError("empty dataset")
    r = ds.orientation_index if ds.has_orientation else np.zeros(len(ds), dtype=np.int64)
    h = encode(m, kind, ds.images, r, support)
    mu = mean_activation(m, ds, transforms, support, kind, gate)
    report = gamma_from_activations(h, mu, delta, transforms)
    report.extra["gate"] = gate
    report.extra["model_kind"] = kind
    return report
