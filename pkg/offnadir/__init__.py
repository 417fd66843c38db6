import logging

from . import data, evaluation, functional, model, optim, tensor, training, uncertainty
from .model import ModelConfig, build_model
from .tensor import Rng, Tensor
from .version import __version__  # noqa: F401

logger = logging.getLogger(__name__)


__all__ = [
    "ModelConfig",
    "Rng",
    "Tensor",
    "build_model",
    "data",
    "evaluation",
    "functional",
    "logger",
    "model",
    "optim",
    "tensor",
    "training",
    "uncertainty",
]
