"""Rotation-gated restricted Boltzmann machines.

A theta-RBM keeps one weight slice per support angle; slices are tied by
exact pixel rotations, and each image is routed to the slice matching its
estimated dominant orientation.
"""

from .data import DataConsistencyError, DataFormatError, ImageDataset, load_amat, load_idx, normalize
from .invariance import GammaReport, gamma_score
from .orientation import PerturbationSpec, assign_orientations, estimate_orientation, perturb_indices
from .rbm import NumericalError, ThetaRBM
from .rotation import RotationModeError, SupportSet, build_support_set
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DataConsistencyError", "DataFormatError", "GammaReport", "ImageDataset", "NumericalError",
    "PerturbationSpec", "RotationModeError", "SupportSet", "ThetaRBM", "TrainConfig",
    "assign_orientations", "build_support_set", "estimate_orientation", "gamma_score", "load_amat",
    "load_idx", "normalize", "perturb_indices", "train",
]
