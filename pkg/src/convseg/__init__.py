"""Per-category DGCNN part segmentation of point-sampled 3D shapes."""

from .dataset import Scene, load_scenes, emit_scenes, synth_generate
from .model import CATEGORIES, CategoryConfig, ModelParams, model_forward, model_init
from .training import TrainConfig, checkpoint_load, checkpoint_save, train_category

__version__ = "0.1.0"

__all__ = [
    "CATEGORIES",
    "CategoryConfig",
    "ModelParams",
    "Scene",
    "TrainConfig",
    "checkpoint_load",
    "checkpoint_save",
    "emit_scenes",
    "load_scenes",
    "model_forward",
    "model_init",
    "synth_generate",
    "train_category",
]
