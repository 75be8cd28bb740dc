"""A small layered deep-learning framework: backend kernels, pooled tensors, unit graphs."""

from . import engine, nn
from .autodiff import Module, Unit
from .errors import (ArgumentError, FormatError, GraphError, ShapeError, StateError,
                     TensorForgeError)
from .models import build_model
from .nn import F
from .tensor import Engine, Tensor, cpu_engine
from .trainkit import loss, optim

__version__ = "0.1.0"

__all__ = [
    "engine", "nn", "F", "loss", "optim", "Module", "Unit", "Engine", "Tensor", "cpu_engine",
    "build_model", "TensorForgeError", "ArgumentError", "FormatError", "GraphError",
    "ShapeError", "StateError",
]
