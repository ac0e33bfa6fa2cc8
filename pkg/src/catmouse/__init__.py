"""Desk-scale adversarial patch laboratory.

A from-scratch differentiable toy object detector, gradient-optimized
evasion patches, patch-aware adversarial training, and the iterated
attacker/defender game between them, with AP-based reporting.
"""

__version__ = "0.1.0"

from .config import GameConfig, desk_config, full_config, load_config, parse_config, save_config
from .detector import DetectorModel, build_detector, load_checkpoint, save_checkpoint, train_detector
from .evaluation import EvalLedger, THRESHOLDS, build_heatmap, evaluate, grayscale_baseline
from .patches import (
    ApplicationProtocol,
    LossWeights,
    Patch,
    apply_protocol,
    init_patch,
    load_patch,
    patch_loss,
    save_patch,
)
from .scenes import DatasetSpec, generate_dataset

__all__ = [
    "ApplicationProtocol",
    "DatasetSpec",
    "DetectorModel",
    "EvalLedger",
    "GameConfig",
    "LossWeights",
    "Patch",
    "THRESHOLDS",
    "apply_protocol",
    "build_detector",
    "build_heatmap",
    "desk_config",
    "evaluate",
    "full_config",
    "generate_dataset",
    "grayscale_baseline",
    "init_patch",
    "load_checkpoint",
    "load_config",
    "load_patch",
    "parse_config",
    "patch_loss",
    "save_checkpoint",
    "save_config",
    "save_patch",
    "train_detector",
]
