"""Joint point cloud completion and part segmentation through gridding.

A partial cloud is scattered onto a regular grid, a 3D CNN predicts a
completed grid and per-category segmentation grids, and an MLP refines
the points recovered from the grid. Everything runs on numpy with a small
reverse-mode autodiff tape.
"""

from .core import (FeatureGrid, GridCoordMap, LabeledPointCloud, Normalization, PointCloud,
                   ScalarGrid, derive_seed, fit_normalization, make_rng, normalize_cloud)
from .errors import (ConfigError, DataError, DegenerateInput, EmptyCloud, GRJointError,
                     LabelRange, NumericError, ParseError, RangeError, ShapeError)
from .autodiff import Tape, Tensor
from .gridding import (cell_values, cubic_feature_sampling, gridding, gridding_reverse,
                       map_labels)
from .losses import chamfer, combined_loss, cross_entropy, gridding_loss, transfer_labels
from .config import ModelConfig, RunConfig
from .network import ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .data import TrainingPair, degrade, load_shapenet_part, synth_dataset, synth_shape

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DegenerateInput", "EmptyCloud", "FeatureGrid",
    "GRJointError", "GridCoordMap", "LabelRange", "LabeledPointCloud", "ModelConfig",
    "ModelParams", "Normalization", "NumericError", "ParseError", "PointCloud", "RangeError",
    "RunConfig", "ScalarGrid", "ShapeError", "Tape", "Tensor", "TrainingPair", "cell_values",
    "chamfer", "combined_loss", "cross_entropy", "cubic_feature_sampling", "degrade",
    "derive_seed", "fit_normalization", "forward", "gridding", "gridding_loss",
    "gridding_reverse", "init_params", "load_checkpoint", "load_shapenet_part", "make_rng",
    "map_labels", "normalize_cloud", "save_checkpoint", "synth_dataset", "synth_shape",
    "transfer_labels",
]
