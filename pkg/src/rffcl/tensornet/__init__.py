"""
A small numpy neural-network core: reverse-mode tensors, the layers the fingerprinting
CNN needs, Adam and a cosine learning-rate schedule.
"""
from .layers import Identity, Module, Sequential
from .model import BackboneConfig, ModelState, load_checkpoint, save_checkpoint
from .optim import Adam, ParamGroup, cosine_lr
from .tensor import Tensor

__all__ = [
    "Adam",
    "BackboneConfig",
    "Identity",
    "ModelState",
    "Module",
    "ParamGroup",
    "Sequential",
    "Tensor",
    "cosine_lr",
    "load_checkpoint",
    "save_checkpoint",
]
