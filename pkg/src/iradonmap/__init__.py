"""Learned parallel-beam Radon inversion (iRadonMap) with classical FBP oracles."""
from .geometry import BpTable, ImagingGeometry, build_bp_table, sinusoid_s
from .layers import IRadonMap, canonical_params
from .train import OptimizerState, TrainingConfig, mse_loss, rmsprop_step, train
from .transform import backproject, fbp, project_interp, project_siddon, ramp_filter

__version__ = "0.1.0"

__all__ = [
    "BpTable",
    "ImagingGeometry",
    "IRadonMap",
    "OptimizerState",
    "TrainingConfig",
    "backproject",
    "build_bp_table",
    "canonical_params",
    "fbp",
    "mse_loss",
    "project_interp",
    "project_siddon",
    "ramp_filter",
    "rmsprop_step",
    "sinusoid_s",
    "train",
]
