"""Early smoke segmentation with a focus-and-separation network."""

from .config import TrainConfig, load_config
from .model import ABLATION_ROWS, FoSp

__all__ = ["ABLATION_ROWS", "FoSp", "TrainConfig", "load_config"]
__version__ = "0.1.0"
