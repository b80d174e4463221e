"""Infrared small-target detection with supervised attention and patch-level segmentation.

A self-contained numpy implementation: a reverse-mode autograd core, the
network, its losses and optimizer, synthetic data, and the evaluation
protocol (Pd/Fa curves, AUC, target- and pixel-level F1).
"""
from .detect import Detection, ThresholdSpec, adaptive_threshold, connected_components, detect
from .errors import ConfigError, DataError, LPNetError, NumericError, ShapeError
from .metrics import MatchRule, MetricsReport, evaluate
from .model import DESK_CONFIG, LPNet, NetworkConfig, load_checkpoint, param_count, save_checkpoint
from .patching import PatchGrid, fuse, split
from .target_spread import GaussianLowPassSpec, target_spread_map
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DESK_CONFIG", "Detection", "GaussianLowPassSpec", "LPNet",
    "LPNetError", "MatchRule", "MetricsReport", "NetworkConfig", "NumericError", "PatchGrid",
    "ShapeError", "ThresholdSpec", "TrainConfig", "adaptive_threshold", "connected_components",
    "detect", "evaluate", "fuse", "load_checkpoint", "param_count", "save_checkpoint", "split",
    "target_spread_map", "train",
]
