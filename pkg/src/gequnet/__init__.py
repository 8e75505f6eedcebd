"""Group-equivariant UNet for radio pathloss maps, written on numpy."""

from .groups import GroupElement, GroupSpec
from .model import Model, ModelConfig, build, load_checkpoint, save_checkpoint

__all__ = ["GroupElement", "GroupSpec", "Model", "ModelConfig", "build", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
