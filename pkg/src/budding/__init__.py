"""Budding ensembles: two-headed anchor detectors trained with tandem losses."""
from .geometry import Box, Detection, GridSpec
from .model import BuddingDetector, ModelConfig, build_model
from .tandem import LossWeights, TandemOutput, bea_loss, tandem_loss
from .train import TrainConfig, train

__all__ = [
    "Box", "Detection", "GridSpec", "BuddingDetector", "ModelConfig", "build_model",
    "LossWeights", "TandemOutput", "bea_loss", "tandem_loss", "TrainConfig", "train",
]
__version__ = "0.1.0"
