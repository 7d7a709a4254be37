from eda.data.generation import GenConfig, generate_dataset
from eda.data.records import (
    Checkpoint,
    load_anchors,
    load_checkpoint,
    load_scenes,
    save_anchors,
    save_checkpoint,
    save_scenes,
)

__all__ = (
    "Checkpoint",
    "GenConfig",
    "generate_dataset",
    "load_anchors",
    "load_checkpoint",
    "load_scenes",
    "save_anchors",
    "save_checkpoint",
    "save_scenes",
)
