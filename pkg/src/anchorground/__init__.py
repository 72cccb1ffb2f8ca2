"""Training-free style attention grounding with an anchor token, on a toy transformer and synthetic screens."""

from .errors import GroundingError
from .geometry import BBox, CropRegion, PatchGrid
from .grounding import StrategyConfig, ground, predict_click
from .labeling import patch_labels
from .model import GroundingTransformer, ModelConfig, init_model

__all__ = [
    "BBox",
    "CropRegion",
    "GroundingError",
    "GroundingTransformer",
    "ModelConfig",
    "PatchGrid",
    "StrategyConfig",
    "ground",
    "init_model",
    "patch_labels",
    "predict_click",
]
