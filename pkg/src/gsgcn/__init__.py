"""Group-skeleton action recognition with multi-scale spatial-temporal graph convolutions."""

from .graph import build_adjacency_set, build_skeleton_graph
from .model import DEFAULT_CONFIG, GSGCN, MICRO_CONFIG, ModelConfig
from .training import TrainConfig, focal_loss, lr_at, train

__all__ = [
    "DEFAULT_CONFIG",
    "GSGCN",
    "MICRO_CONFIG",
    "ModelConfig",
    "TrainConfig",
    "build_adjacency_set",
    "build_skeleton_graph",
    "focal_loss",
    "lr_at",
    "train",
]
__version__ = "0.1.0"
