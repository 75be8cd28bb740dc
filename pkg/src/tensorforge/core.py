"""Engine core: pooled device memory, staged uploads and parameter checks."""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np

from .backend.base import CONV_ALGORITHMS, ConvDescriptor, DeviceBuffer, EngineBase
from .backend.streams import CompletionEvent, StreamQueue
from .errors import ArgumentError, BoundsError, PoolIntegrityError, ShapeError

MIN_BLOCK = 256
DEFAULT_STAGING_BYTES = 16 << 20
DEFAULT_STAGING_SLOT = 4 << 20


def size_class(nbytes: int) -> int:
    """Smallest power of two >= nbytes, floored at 256 bytes; 0 stays 0."""
    if nbytes < 0:
        raise ArgumentError(f"cannot acquire {nbytes} bytes")
    if nbytes == 0:
        return 0
    return max(MIN_BLOCK, 1 << (nbytes - 1).bit_length())


@dataclass(frozen=True)
class PoolStats:
    reserved_bytes: int = 0
    in_use_bytes: int = 0
    peak_in_use_bytes: int = 0
    acquire_hits: int = 0
    acquire_misses: int = 0
    device_allocs: int = 0
    device_frees: int = 0

    @property
    def free_bytes(self) -> int:
        return self.reserved_bytes - self.in_use_bytes


# zero-capacity handoff for empty requests; never touches the backend
EMPTY_BUFFER = DeviceBuffer(handle=0, capacity_bytes=0, device_id=0)


class MemoryPool:
    def __init__(self, backend: EngineBase, zero_on_acquire: bool = True):
        self.backend = backend
        self.zero_on_acquire = zero_on_acquire
        self._lock = threading.Lock()
        self._free: dict[int, list[DeviceBuffer]] = defaultdict(list)
        self._in_use: dict[int, DeviceBuffer] = {}
        self._stats = PoolStats()

    def acquire(self, nbytes: int) -> DeviceBuffer:
        cls = size_class(nbytes)
        if cls == 0:
            return EMPTY_BUFFER
        with self._lock:
            free = self._free[cls]
            s = self._stats
            if free:
                buf = free.pop()
                s = replace(s, acquire_hits=s.acquire_hits + 1)
            else:
                buf = self.backend.alloc(cls)
                s = replace(s, acquire_misses=s.acquire_misses + 1,
                            device_allocs=s.device_allocs + 1,
                            reserved_bytes=s.reserved_bytes + cls)
            in_use = s.in_use_bytes + cls
            self._stats = replace(s, in_use_bytes=in_use,
                                  peak_in_use_bytes=max(s.peak_in_use_bytes, in_use))
            self._in_use[buf.handle] = buf
        if self.zero_on_acquire:
            self.backend.memset(buf, 0)
        return buf

    def release(self, buf: DeviceBuffer) -> None:
        if buf.handle == EMPTY_BUFFER.handle:
            return
        with self._lock:
            if self._in_use.pop(buf.handle, None) is None:
                raise PoolIntegrityError(
                    f"buffer {buf.handle} is not in use by this pool (foreign or double release)")
            cls = buf.capacity_bytes
            self._free[cls].append(buf)
            s = self._stats
            self._stats = replace(s, in_use_bytes=s.in_use_bytes - cls)

    def owns(self, buf: DeviceBuffer) -> bool:
        return buf.handle in self._in_use

    def stats(self) -> PoolStats:
        with self._lock:
            return self._stats

    def free_list_length(self, cls: int | None = None) -> int:
        with self._lock:
            if cls is not None:
                return len(self._free.get(cls, ()))
            return sum(len(v) for v in self._free.values())

    def trim(self) -> int:
        with self._lock:
            victims = [b for lst in self._free.values() for b in lst]
            self._free.clear()
            freed = sum(b.capacity_bytes for b in victims)
            s = self._stats
            self._stats = replace(s, reserved_bytes=s.reserved_bytes - freed,
                                  device_frees=s.device_frees + len(victims))
        for b in victims:
            self.backend.free(b)
        return freed


class StagingCache:
    """Fixed set of reusable host slots; each slot carries one transfer at a time."""

    def __init__(self, capacity_bytes: int = DEFAULT_STAGING_BYTES,
                 slot_bytes: int = DEFAULT_STAGING_SLOT):
        if capacity_bytes < slot_bytes or slot_bytes <= 0:
            raise ArgumentError("staging capacity must hold at least one positive-size slot")
        self.capacity_bytes = capacity_bytes
        self.slot_bytes = slot_bytes
        n = capacity_bytes // slot_bytes
        self._slots = [np.zeros(slot_bytes, dtype=np.uint8) for _ in range(n)]
        self._idle = list(range(n))
        self._cond = threading.Condition()
        self.transfers = 0
        self.chunks = 0

    @property
    def slot_count(self) -> int:
        return len(self._slots)

    def _take(self) -> int:
        with self._cond:
            while not self._idle:
                self._cond.wait()
            return self._idle.pop()

    def _give(self, i: int) -> None:
        with self._cond:
            self._idle.append(i)
            self._cond.notify()

    def upload(self, backend: EngineBase, data, dst: DeviceBuffer,
               stream: StreamQueue) -> CompletionEvent:
        src = np.asarray(memoryview(data)).reshape(-1).view(np.uint8)
        n = src.size
        if n > dst.capacity_bytes:
            raise BoundsError(f"upload of {n} bytes exceeds buffer capacity {dst.capacity_bytes}")
        self.transfers += 1
        if n == 0:
            return CompletionEvent.completed()
        dst_mem = backend.view(dst, (dst.capacity_bytes,), np.uint8)
        last = None
        for start in range(0, n, self.slot_bytes):
            stop = min(n, start + self.slot_bytes)
            i = self._take()
            slot = self._slots[i]
            slot[:stop - start] = src[start:stop]
            self.chunks += 1

            def run(slot=slot, start=start, stop=stop):
                dst_mem[start:stop] = slot[:stop - start]

            last = backend.enqueue(run, stream)
            last.then(lambda _ev, i=i: self._give(i))
        return last


# ---------------------------------------------------------------------------
# parameter checks
# ---------------------------------------------------------------------------

def _fail(op, arg, expected, got):
    raise ShapeError(f"{op}: argument '{arg}' expected {expected}, got {got}")


def _positive(op, **values):
    for k, v in values.items():
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ShapeError(f"{op}: argument '{k}' must be a positive integer, got {v!r}")


def _same(op, a_name, a, b_name, b):
    if tuple(a) != tuple(b):
        raise ShapeError(f"{op}: '{a_name}' shape {tuple(a)} must equal '{b_name}' shape {tuple(b)}")


def _check_conv(op, x_shape, w_shape, desc: ConvDescriptor, dy_shape=None):
    _positive(op, in_channels=desc.in_channels, out_channels=desc.out_channels,
              kernel_h=desc.kernel_h, kernel_w=desc.kernel_w,
              stride_h=desc.stride_h, stride_w=desc.stride_w)
    if desc.pad_h < 0 or desc.pad_w < 0:
        _fail(op, "padding", "non-negative", (desc.pad_h, desc.pad_w))
    if desc.algorithm not in CONV_ALGORITHMS:
        raise ArgumentError(f"{op}: unknown algorithm {desc.algorithm!r}")
    if len(x_shape) != 4:
        _fail(op, "x", "NHWC rank 4", tuple(x_shape))
    n, h, w, c = x_shape
    if c != desc.in_channels:
        _fail(op, "x", f"{desc.in_channels} channels (channel-mismatch)", c)
    if w_shape is not None and tuple(w_shape) != desc.filter_shape:
        _fail(op, "w", f"filter shape {desc.filter_shape}", tuple(w_shape))
    if h + 2 * desc.pad_h < desc.kernel_h or w + 2 * desc.pad_w < desc.kernel_w:
        _fail(op, "x", f"spatial extent >= kernel {desc.kernel_h}x{desc.kernel_w} after padding",
              (h, w))
    oh = (h + 2 * desc.pad_h - desc.kernel_h) // desc.stride_h + 1
    ow = (w + 2 * desc.pad_w - desc.kernel_w) // desc.stride_w + 1
    if dy_shape is not None:
        _same(op, "dy", dy_shape, "forward output", (n, oh, ow, desc.out_channels))
    return (n, oh, ow, desc.out_channels)


def validate_params(op_name: str, **kw) -> None:
    """Raise a descriptive ShapeError/ArgumentError if ``op_name`` would be ill-posed."""
    op = op_name
    if op == "conv2d":
        _check_conv(op, kw["x"], kw["w"], kw["desc"])
    elif op == "conv2d_backward_data":
        _check_conv(op, kw["x"], kw["w"], kw["desc"], kw["dy"])
    elif op == "conv2d_backward_filter":
        _check_conv(op, kw["x"], None, kw["desc"], kw["dy"])
    elif op == "gemm":
        a, b = kw["a"], kw["b"]
        if len(a) != 2 or len(b) != 2:
            _fail(op, "a/b", "rank-2 matrices", (tuple(a), tuple(b)))
        ka = a[0] if kw.get("transpose_a") else a[1]
        kb = b[1] if kw.get("transpose_b") else b[0]
        if ka != kb:
            _fail(op, "b", f"inner dimension {ka}", kb)
        if kw.get("bias") is not None:
            nb = b[0] if kw.get("transpose_b") else b[1]
            if tuple(kw["bias"]) != (nb,):
                _fail(op, "bias", f"({nb},)", tuple(kw["bias"]))
    elif op in ("batchnorm", "batchnorm_backward"):
        x = kw["x"]
        if len(x) not in (2, 4):
            _fail(op, "x", "rank 2 or 4", tuple(x))
        c = x[-1]
        for k in ("gamma", "beta", "running_mean", "running_var"):
            if kw.get(k) is not None and tuple(kw[k]) != (c,):
                _fail(op, k, f"({c},) channel-mismatch", tuple(kw[k]))
        if "eps" in kw and not kw["eps"] > 0:
            raise ArgumentError(f"{op}: argument 'eps' must be positive, got {kw['eps']}")
        if "momentum" in kw and not 0.0 <= kw["momentum"] <= 1.0:
            raise ArgumentError(f"{op}: argument 'momentum' must lie in [0, 1]")
        if kw.get("dy") is not None:
            _same(op, "dy", kw["dy"], "x", x)
    elif op == "maxpool2d":
        x = kw["x"]
        if len(x) != 4:
            _fail(op, "x", "NHWC rank 4", tuple(x))
        target = kw.get("adaptive_target")
        if target is not None:
            if target < 1 or target > min(x[1], x[2]):
                _fail(op, "adaptive_target", f"1..{min(x[1], x[2])}", target)
        else:
            wh, ww = kw["window"]
            sh, sw = kw["stride"]
            _positive(op, window_h=wh, window_w=ww, stride_h=sh, stride_w=sw)
            pad = kw.get("pad", 0)
            if not 0 <= pad < min(wh, ww):
                _fail(op, "pad", f"0 <= pad < {min(wh, ww)}", pad)
            if x[1] + 2 * pad < wh or x[2] + 2 * pad < ww:
                _fail(op, "window", f"fit inside {x[1]}x{x[2]} (+pad {pad})", (wh, ww))
    elif op in ("add", "mul"):
        _same(op, "x1", kw["x1"], "x2", kw["x2"])
    elif op == "unary":
        if kw.get("needs_aux") and kw.get("aux") is None:
            raise ArgumentError(f"{kw['code']}: missing aux (forward output)")
        if kw.get("aux") is not None:
            _same(kw["code"], "aux", kw["aux"], "x", kw["x"])
    elif op == "softmax_crossentropy":
        if len(kw["logits"]) != 2:
            _fail(op, "logits", "rank 2 [rows, C]", tuple(kw["logits"]))
        _same(op, "onehot", kw["onehot"], "logits", kw["logits"])
    elif op in ("adam_step", "sgd_step"):
        p = kw["param"]
        for k in ("grad", "m", "v"):
            if kw.get(k) is not None:
                _same(op, k, kw[k], "param", p)
    elif op == "uniform_fill":
        if kw["low"] > kw["high"]:
            raise ArgumentError(f"{op}: low {kw['low']} > high {kw['high']}")
    elif op == "reduce_field_sum":
        if len(kw["x"]) not in (2, 4):
            _fail(op, "x", "rank 2 or 4", tuple(kw["x"]))
    else:
        raise ArgumentError(f"no parameter checks registered for {op_name!r}")


class EngineCore:
    """Backend + pool + staging cache + default stream."""

    def __init__(self, backend: EngineBase, staging_bytes: int = DEFAULT_STAGING_BYTES,
                 zero_on_acquire: bool = True):
        self.backend = backend
        self.pool = MemoryPool(backend, zero_on_acquire=zero_on_acquire)
        slot = min(DEFAULT_STAGING_SLOT, staging_bytes)
        self.staging = StagingCache(staging_bytes, slot)
        self.default_stream = backend.create_stream()

    def staged_upload(self, data, dst: DeviceBuffer, stream: StreamQueue | None = None):
        return self.staging.upload(self.backend, data, dst, stream or self.default_stream)

    def pool_stats(self) -> PoolStats:
        return self.pool.stats()


__all__ = [
    "EngineCore", "MemoryPool", "PoolStats", "StagingCache", "size_class",
    "validate_params", "EMPTY_BUFFER",
]
