"""Multitask dense prediction (segmentation + depth) for comics panels.

A numpy autodiff engine, a shifted-window transformer encoder with mirrored
task decoders, domain transferable attention, GradNorm-weighted training,
the evaluation metrics and a prediction-guided seam-carving retargeter.
"""

from .config import ConfigError, ModelConfig
from .decoder import MTLModel, TaskPrediction, forward_mtl, predict

__version__ = "0.1.0"

__all__ = ["ConfigError", "ModelConfig", "MTLModel", "TaskPrediction", "forward_mtl", "predict"]
