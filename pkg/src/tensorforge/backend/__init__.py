from .base import (
    AUTO,
    CONV_ALGORITHMS,
    GENERAL_IM2COL,
    SMALL_FEATURE_DIRECT,
    BackendDescriptor,
    ConvDescriptor,
    DeviceBuffer,
    EngineBase,
)
from .cpu import CpuBackend
from .streams import CompletionEvent, StreamQueue

__all__ = [
    "AUTO", "CONV_ALGORITHMS", "GENERAL_IM2COL", "SMALL_FEATURE_DIRECT",
    "BackendDescriptor", "ConvDescriptor", "DeviceBuffer", "EngineBase",
    "CpuBackend", "CompletionEvent", "StreamQueue",
]
