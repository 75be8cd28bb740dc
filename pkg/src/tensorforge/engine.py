"""Engine construction entry points."""

from .backend import CpuBackend
from .core import EngineCore
from .tensor import Engine, Tensor, cpu_engine

cpu = cpu_engine

__all__ = ["CpuBackend", "Engine", "EngineCore", "Tensor", "cpu", "cpu_engine"]
