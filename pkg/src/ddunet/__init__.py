"""DDU-Net: a U-Net whose weight-shared clones segment subimages and exchange
bottleneck features through a small convolutional network."""

from .model import DDUNet, ModelConfig, UNet, build, parameter_table
from .partition import PartitionLayout, make_layout
from .runtime import Runtime, RuntimePlan, make_plan
from .train import TrainConfig, dice_loss, fit

__all__ = [
    "DDUNet", "ModelConfig", "UNet", "build", "parameter_table",
    "PartitionLayout", "make_layout", "Runtime", "RuntimePlan", "make_plan",
    "TrainConfig", "dice_loss", "fit",
]
__version__ = "0.1.0"
