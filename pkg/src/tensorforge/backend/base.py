"""Abstract device primitives.

Everything above this layer talks to a device only through :class:`EngineBase`.
Buffers are opaque handles; kernels receive array views over buffer memory and
write into caller-supplied outputs, the way a device API takes output pointers.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Callable

from ..errors import ArgumentError, ShapeError
from .streams import CompletionEvent, StreamQueue

AUTO = "auto"
GENERAL_IM2COL = "general_im2col"
SMALL_FEATURE_DIRECT = "small_feature_direct"
CONV_ALGORITHMS = (AUTO, GENERAL_IM2COL, SMALL_FEATURE_DIRECT)


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    alignment_bytes: int = 16
    max_streams: int = 16

    def __post_init__(self):
        a = self.alignment_bytes
        if a < 16 or a & (a - 1):
            raise ArgumentError(f"alignment_bytes must be a power of two >= 16, got {a}")
        if self.max_streams < 1:
            raise ArgumentError("max_streams must be positive")


@dataclass(frozen=True)
class DeviceBuffer:
    handle: int
    capacity_bytes: int
    device_id: int = 0


@dataclass(frozen=True)
class ConvDescriptor:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    algorithm: str = AUTO

    @classmethod
    def square(cls, in_channels, out_channels, kernel, stride=1, padding=0, algorithm=AUTO):
        return cls(in_channels, out_channels, kernel, kernel, stride, stride,
                   padding, padding, algorithm)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        """Floor form of (in + 2*pad - kernel) / stride + 1; raises if not positive."""
        if self.stride_h <= 0 or self.stride_w <= 0:
            raise ShapeError("conv stride must be positive")
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if h + 2 * self.pad_h < self.kernel_h or w + 2 * self.pad_w < self.kernel_w:
            raise ShapeError(
                f"conv kernel {self.kernel_h}x{self.kernel_w} does not fit input "
                f"{h}x{w} with padding {self.pad_h}x{self.pad_w}")
        return oh, ow

    @property
    def filter_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.kernel_h, self.kernel_w, self.in_channels)


class EngineBase(abc.ABC):
    """Device primitive set. Subclass once per device kind."""

    descriptor: BackendDescriptor

    # -- memory ---------------------------------------------------------------
    @abc.abstractmethod
    def alloc(self, nbytes: int) -> DeviceBuffer: ...

    @abc.abstractmethod
    def free(self, buf: DeviceBuffer) -> None: ...

    @abc.abstractmethod
    def memset(self, buf: DeviceBuffer, value: int = 0, nbytes: int | None = None) -> None: ...

    @abc.abstractmethod
    def view(self, buf: DeviceBuffer, shape: tuple, dtype) -> object:
        """Typed view over the first bytes of ``buf``."""

    @abc.abstractmethod
    def copy(self, src, dst, nbytes: int, stream: StreamQueue | None = None) -> CompletionEvent: ...

    @abc.abstractmethod
    def live_allocations(self) -> int: ...

    # -- scheduling -----------------------------------------------------------
    @abc.abstractmethod
    def create_stream(self) -> StreamQueue: ...

    @abc.abstractmethod
    def destroy_stream(self, stream: StreamQueue) -> None: ...

    @abc.abstractmethod
    def enqueue(self, kernel: Callable[[], None], stream: StreamQueue) -> CompletionEvent: ...

    # -- kernels --------------------------------------------------------------
    @abc.abstractmethod
    def gemm(self, a, b, out, transpose_a=False, transpose_b=False, bias=None): ...

    @abc.abstractmethod
    def conv2d_forward(self, x, w, desc: ConvDescriptor, out, bias=None): ...

    @abc.abstractmethod
    def conv2d_backward_data(self, dy, w, desc: ConvDescriptor, out): ...

    @abc.abstractmethod
    def conv2d_backward_filter(self, x, dy, desc: ConvDescriptor, out): ...

    @abc.abstractmethod
    def batchnorm_forward(self, x, gamma, beta, running_mean, running_var, out,
                          saved_mean, saved_inv_std, training, eps, momentum): ...

    @abc.abstractmethod
    def batchnorm_backward(self, dy, x, gamma, saved_mean, saved_inv_std, dx, dgamma, dbeta): ...

    @abc.abstractmethod
    def maxpool2d_forward(self, x, out, argmax, window, stride, pad, adaptive_target=None): ...

    @abc.abstractmethod
    def maxpool2d_backward(self, dy, argmax, out): ...

    @abc.abstractmethod
    def elementwise_unary(self, op_code: str, x, out, aux=None, alpha: float = 0.0): ...

    @abc.abstractmethod
    def elementwise_binary(self, op_code: str, x1, x2, out): ...

    @abc.abstractmethod
    def reduce_field_sum(self, x, out): ...

    @abc.abstractmethod
    def softmax_crossentropy(self, logits, onehot, dlogits, check_labels=True) -> float: ...

    @abc.abstractmethod
    def adam_step(self, param, grad, m, v, t, lr, beta1, beta2, eps): ...

    @abc.abstractmethod
    def sgd_step(self, param, grad, lr): ...

    @abc.abstractmethod
    def uniform_fill(self, out, low, high, seed): ...
