"""Gated multimodal 3D fusion classifier on a self-contained numpy engine.

Layers of the package, bottom up:

- ``tensor`` / ``kernels`` / ``gradcheck``: rank-5 tensor type, reverse-mode
  autodiff, hand-built volumetric kernels, finite-difference oracle
- ``config`` / ``blocks`` / ``network``: architecture and checkpointing
- ``losses`` / ``optim`` / ``training``: focal loss, AdamW + cosine schedule,
  cross-validation training loop
- ``phantoms`` / ``augment`` / ``volumeio``: synthetic subjects, train-time
  augmentation, volume file format and manifest
- ``metrics`` / ``gradcam`` / ``reporting``: evaluation suite and explanations
- ``cli``: the ``gfn`` executable
"""

from .config import NetworkConfig, TrainPlan
from .network import GateFuseNet, build_network, load_checkpoint, save_checkpoint
from .tensor import Parameter, Tensor

__all__ = [
    "GateFuseNet",
    "NetworkConfig",
    "Parameter",
    "Tensor",
    "TrainPlan",
    "build_network",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
