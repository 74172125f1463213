"""Frozen-backbone multimodal adaptor toolkit on a small numpy autograd engine."""

from .adaptor import Model, even_depths, init_adaptor, mm_forward
from .backbone import BackboneConfig, build_backbone, text_forward, train_text_lm
from .cache import KVCache
from .checkpoint import load_checkpoint, save_checkpoint
from .runtime import WorkflowRequest, generate, route
from .trainer import TrainStageConfig, default_stages, run_pipeline, run_stage

__all__ = [
    "BackboneConfig",
    "KVCache",
    "Model",
    "TrainStageConfig",
    "WorkflowRequest",
    "build_backbone",
    "default_stages",
    "even_depths",
    "generate",
    "init_adaptor",
    "load_checkpoint",
    "mm_forward",
    "route",
    "run_pipeline",
    "run_stage",
    "save_checkpoint",
    "text_forward",
    "train_text_lm",
]
