"""Neural implicit surfaces from multi-view images via unbiased SDF volume rendering."""

from __future__ import annotations

from .field import Scene, Ray
from .neural import MlpConfig, NeuralSdf, geometric_init
from .trainer import TrainConfig, train

__all__ = ["Scene", "Ray", "MlpConfig", "NeuralSdf", "geometric_init", "TrainConfig", "train"]
