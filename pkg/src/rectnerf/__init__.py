"""Sparse-view generalizable radiance fields with geometric and appearance rectification."""

from .data import SceneRecord, SyntheticLayout, generate_synthetic_scene, load_dataset, load_scene
from .errors import (
    BehindCameraError,
    CalibrationError,
    CheckpointError,
    ConfigError,
    DomainError,
    InvalidCameraError,
    NumericalError,
    RectNeRFError,
    SceneLoadError,
    SplitError,
)
from .estimator import RectNeRFRegressor
from .model import ModelConfig, SparseViewNeRF
from .renderer import render_image
from .training import PRESETS, TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError",
    "CalibrationError",
    "CheckpointError",
    "ConfigError",
    "DomainError",
    "InvalidCameraError",
    "ModelConfig",
    "NumericalError",
    "PRESETS",
    "RectNeRFError",
    "RectNeRFRegressor",
    "SceneLoadError",
    "SceneRecord",
    "SparseViewNeRF",
    "SplitError",
    "SyntheticLayout",
    "TrainConfig",
    "Trainer",
    "generate_synthetic_scene",
    "load_dataset",
    "load_scene",
    "render_image",
]
