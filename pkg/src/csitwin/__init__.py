"""Digital-twin-aided CSI compression lab.

Ray-traced channels over box-world scenes, delay-angular preprocessing,
a numpy CSI codec, and twin pretraining with target refinement.
"""
from .channel import SystemConfig, sum_rate
from .codec import CodecParams, TrainConfig, init_params, nmse, nmse_db, train
from .pipeline import CsiDataset, generate_dataset, load_dataset, save_dataset, split
from .scene import Scene, builtin_scene, builtin_scenes, derive_twin_scene, load_scene, save_scene

__version__ = "0.1.0"

__all__ = [
    "CodecParams", "CsiDataset", "Scene", "SystemConfig", "TrainConfig", "builtin_scene",
    "builtin_scenes", "derive_twin_scene", "generate_dataset", "init_params", "load_dataset",
    "load_scene", "nmse", "nmse_db", "save_dataset", "save_scene", "split", "sum_rate", "train",
]
