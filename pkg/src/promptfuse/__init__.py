"""Prompted foundation-feature fusion for BEV 3D detection at desk scale."""
from __future__ import annotations

from .config import ModelConfig, PromptChannels, desk_config, mode_config, paper_config
from .model import Detector, load_checkpoint, model_from_checkpoint
from .scenes import SceneSample, SceneSpec, generate_dataset, subsample_dataset

__all__ = [
    "Detector",
    "ModelConfig",
    "PromptChannels",
    "SceneSample",
    "SceneSpec",
    "desk_config",
    "generate_dataset",
    "load_checkpoint",
    "mode_config",
    "model_from_checkpoint",
    "paper_config",
    "subsample_dataset",
]
__version__ = "0.1.0"
