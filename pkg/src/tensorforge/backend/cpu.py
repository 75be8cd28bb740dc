"""Reference CPU backend: host memory stands in for device memory."""

from __future__ import annotations

import itertools
import threading

import numpy as np

from ..errors import AllocationError, ArgumentError, BoundsError, InvalidHandleError, InvalidStreamError
from . import kernels as K
from .base import BackendDescriptor, ConvDescriptor, DeviceBuffer, EngineBase
from .streams import CompletionEvent, StreamQueue


class CpuBackend(EngineBase):
    def __init__(self, alignment_bytes: int = 16, max_streams: int = 16,
                 memory_limit: int | None = None,
                 small_feature_threshold: int = K.DEFAULT_SMALL_FEATURE_THRESHOLD):
        self.descriptor = BackendDescriptor("cpu-reference", alignment_bytes, max_streams)
        self.memory_limit = memory_limit
        self.small_feature_threshold = small_feature_threshold
        self._lock = threading.Lock()
        self._handles = itertools.count(1)
        self._memory: dict[int, np.ndarray] = {}
        self._bytes_live = 0
        self.alloc_count = 0
        self.free_count = 0
        self._streams: dict[int, StreamQueue] = {}
        self._stream_ids = itertools.count(0)
        # conv dispatch log, handy for tests and reports
        self.conv_dispatch: dict[str, int] = {K.GENERAL_IM2COL: 0, K.SMALL_FEATURE_DIRECT: 0}

    # -- memory ---------------------------------------------------------------
    def _round_up(self, nbytes: int) -> int:
        a = self.descriptor.alignment_bytes
        return -(-nbytes // a) * a

    def alloc(self, nbytes: int) -> DeviceBuffer:
        if nbytes < 0:
            raise ArgumentError(f"cannot allocate {nbytes} bytes")
        cap = self._round_up(nbytes)
        with self._lock:
            if self.memory_limit is not None and self._bytes_live + cap > self.memory_limit:
                raise AllocationError(
                    f"allocation of {cap} bytes exceeds backend limit {self.memory_limit}")
            try:
                mem = np.zeros(cap, dtype=np.uint8)
            except MemoryError as exc:
                raise AllocationError(f"host refused {cap} bytes") from exc
            handle = next(self._handles)
            self._memory[handle] = mem
            self._bytes_live += cap
            self.alloc_count += 1
        return DeviceBuffer(handle, cap, 0)

    def free(self, buf: DeviceBuffer) -> None:
        with self._lock:
            mem = self._memory.pop(buf.handle, None)
            if mem is None:
                raise InvalidHandleError(f"buffer handle {buf.handle} is not live")
            self._bytes_live -= mem.size
            self.free_count += 1

    def _mem(self, buf: DeviceBuffer) -> np.ndarray:
        try:
            return self._memory[buf.handle]
        except KeyError:
            raise InvalidHandleError(f"buffer handle {buf.handle} is not live") from None

    def is_live(self, buf: DeviceBuffer) -> bool:
        return buf.handle in self._memory

    def live_allocations(self) -> int:
        return len(self._memory)

    @property
    def live_bytes(self) -> int:
        return self._bytes_live

    def memset(self, buf, value=0, nbytes=None):
        mem = self._mem(buf)
        n = mem.size if nbytes is None else nbytes
        if n > mem.size:
            raise BoundsError(f"memset of {n} bytes exceeds capacity {mem.size}")
        mem[:n] = value

    def view(self, buf, shape, dtype):
        dtype = np.dtype(dtype)
        shape = tuple(shape)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        mem = self._mem(buf)
        if nbytes > mem.size:
            raise BoundsError(f"view of {nbytes} bytes exceeds buffer capacity {mem.size}")
        return mem[:nbytes].view(dtype).reshape(shape)

    def _bytes_of(self, end):
        if isinstance(end, DeviceBuffer):
            return self._mem(end)
        arr = np.asarray(memoryview(end)).reshape(-1)
        return arr.view(np.uint8)

    def copy(self, src, dst, nbytes, stream=None):
        s = self._bytes_of(src)
        d = self._bytes_of(dst)
        if nbytes < 0 or nbytes > s.size or nbytes > d.size:
            raise BoundsError(
                f"copy of {nbytes} bytes out of range (src {s.size}, dst {d.size})")
        if not d.flags.writeable:
            raise ArgumentError("copy destination is read-only")

        def run():
            d[:nbytes] = s[:nbytes]

        if stream is None:
            run()
            return CompletionEvent.completed()
        return self.enqueue(run, stream)

    # -- scheduling -----------------------------------------------------------
    def create_stream(self) -> StreamQueue:
        with self._lock:
            if len(self._streams) >= self.descriptor.max_streams:
                raise AllocationError(f"stream limit {self.descriptor.max_streams} reached")
            sid = next(self._stream_ids)
            s = StreamQueue(sid)
            self._streams[sid] = s
        return s

    def destroy_stream(self, stream: StreamQueue) -> None:
        with self._lock:
            if self._streams.pop(stream.stream_id, None) is None:
                raise InvalidStreamError(f"stream {stream.stream_id} is not registered")
        stream.destroy()

    def enqueue(self, kernel, stream):
        if stream.destroyed:
            raise InvalidStreamError(f"stream {stream.stream_id} has been destroyed")
        return stream.submit(kernel)

    # -- kernels --------------------------------------------------------------
    def gemm(self, a, b, out, transpose_a=False, transpose_b=False, bias=None):
        K.gemm(a, b, out, transpose_a, transpose_b, bias)

    def conv2d_forward(self, x, w, desc: ConvDescriptor, out, bias=None):
        algo = K.conv2d_forward(x, w, desc, out, bias, threshold=self.small_feature_threshold)
        with self._lock:
            self.conv_dispatch[algo] += 1
        return algo

    def conv2d_backward_data(self, dy, w, desc, out):
        K.conv2d_backward_data(dy, w, desc, out)

    def conv2d_backward_filter(self, x, dy, desc, out):
        K.conv2d_backward_filter(x, dy, desc, out)

    def batchnorm_forward(self, x, gamma, beta, running_mean, running_var, out,
                          saved_mean, saved_inv_std, training, eps, momentum):
        K.batchnorm_forward(x, gamma, beta, running_mean, running_var, out,
                            saved_mean, saved_inv_std, training, eps, momentum)

    def batchnorm_backward(self, dy, x, gamma, saved_mean, saved_inv_std, dx, dgamma, dbeta):
        K.batchnorm_backward(dy, x, gamma, saved_mean, saved_inv_std, dx, dgamma, dbeta)

    def maxpool2d_forward(self, x, out, argmax, window, stride, pad, adaptive_target=None):
        K.maxpool2d_forward(x, out, argmax, window, stride, pad, adaptive_target)

    def maxpool2d_backward(self, dy, argmax, out):
        K.maxpool2d_backward(dy, argmax, out)

    def elementwise_unary(self, op_code, x, out, aux=None, alpha=0.0):
        K.elementwise_unary(op_code, x, out, aux, alpha)

    def elementwise_binary(self, op_code, x1, x2, out):
        K.elementwise_binary(op_code, x1, x2, out)

    def reduce_field_sum(self, x, out):
        K.reduce_field_sum(x, out)

    def softmax_crossentropy(self, logits, onehot, dlogits, check_labels=True):
        return K.softmax_crossentropy(logits, onehot, dlogits, check_labels)

    def adam_step(self, param, grad, m, v, t, lr, beta1, beta2, eps):
        K.adam_step(param, grad, m, v, t, lr, beta1, beta2, eps)

    def sgd_step(self, param, grad, lr):
        K.sgd_step(param, grad, lr)

    def uniform_fill(self, out, low, high, seed):
        K.uniform_fill(out, low, high, seed)

    def close(self):
        for s in list(self._streams.values()):
            self.destroy_stream(s)
