"""Crowd counting by density regression with attention-fused branch heads."""

from .annotations import DetectionBox, HeadPoint, ImageRecord, load_dataset, save_sizes
from .densitymaps import DensityMap, ScaleMaskSet, render_density, render_scale_masks
from .headsize import SizeEstimatorConfig, estimate_sizes, fit_bins
from .losses import LossConfig, total_loss
from .metrics import EvalResult, evaluate
from .network import BackboneConfig, MultiBranchNet, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "DensityMap", "DetectionBox", "EvalResult", "HeadPoint", "ImageRecord",
    "LossConfig", "MultiBranchNet", "ScaleMaskSet", "SizeEstimatorConfig", "build_model",
    "estimate_sizes", "evaluate", "fit_bins", "load_checkpoint", "load_dataset", "render_density",
    "render_scale_masks", "save_checkpoint", "save_sizes", "total_loss",
]
