"""Tensors and the operator engine.

A tensor's last dimension is stored padded to a multiple of four elements;
every operator sees only the logical lanes and pad lanes stay zero. Operators
are enqueued on a stream; in sync mode the engine waits for each one before
returning, in async mode the result tensor comes back with a pending event.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

from .backend import CpuBackend, kernels as K
from .backend.base import ConvDescriptor, DeviceBuffer
from .backend.streams import CompletionEvent, StreamQueue
from .core import EngineCore, PoolStats, validate_params
from .errors import ArgumentError, BoundsError, InvalidHandleError, ShapeError

DTYPES = {"float32": np.float32, "int8": np.uint8, "int32": np.int32}
LANE = 4


def padded_extent(n: int) -> int:
    return -(-n // LANE) * LANE


def layout_map(shape, index) -> int:
    """Physical element offset of a logical index under last-dimension padding."""
    shape = tuple(shape)
    index = tuple(index)
    if len(index) != len(shape):
        raise BoundsError(f"index {index} has rank {len(index)}, shape {shape} has {len(shape)}")
    strides = [0] * len(shape)
    acc = 1
    for d in range(len(shape) - 1, -1, -1):
        strides[d] = acc
        acc *= padded_extent(shape[d]) if d == len(shape) - 1 else shape[d]
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise BoundsError(f"index {index} out of range for shape {shape}")
    return sum(i * s for i, s in zip(index, strides))


def _prune(events):
    return [e for e in events if not e.done]


class _Storage:
    """A pooled buffer shared by a tensor and its zero-copy views."""

    __slots__ = ("buffer", "refs", "event", "readers")

    def __init__(self, buffer: DeviceBuffer, event: CompletionEvent | None = None):
        self.buffer = buffer
        self.refs = 1
        self.event = event or CompletionEvent.completed()
        self.readers: list[CompletionEvent] = []


class Tensor:
    def __init__(self, engine: "Engine", shape, dtype: str, storage: _Storage,
                 event: CompletionEvent | None = None):
        self.engine = engine
        self.shape = tuple(int(s) for s in shape)
        self.dtype = dtype
        self.physical_last = padded_extent(self.shape[-1]) if self.shape else 1
        self._storage = storage
        if event is not None:
            storage.event = event
        self.grad: Tensor | None = None
        self.requires_grad = False
        self.is_param = False
        self.name = ""
        # graph bookkeeping, owned by the autodiff layer
        self.producer = None
        self.overwritten = False
        self._alive = True

    @property
    def event(self) -> CompletionEvent:
        return self._storage.event

    @event.setter
    def event(self, ev: CompletionEvent):
        self._storage.event = ev

    @property
    def _readers(self) -> list:
        return self._storage.readers

    @_readers.setter
    def _readers(self, events):
        self._storage.readers = events

    # -- layout ---------------------------------------------------------------
    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def physical_shape(self) -> tuple:
        return self.shape[:-1] + (self.physical_last,)

    @property
    def nbytes(self) -> int:
        return math.prod(self.physical_shape) * np.dtype(DTYPES[self.dtype]).itemsize

    @property
    def buffer(self) -> DeviceBuffer:
        self._check_alive()
        return self._storage.buffer

    @property
    def alive(self) -> bool:
        return self._alive

    def _check_alive(self):
        if not self._alive:
            raise InvalidHandleError(f"tensor {self.name or hex(id(self))} has been deleted")

    def physical(self) -> np.ndarray:
        self._check_alive()
        if self.size == 0:
            return np.zeros(self.physical_shape, DTYPES[self.dtype])
        return self.engine.backend.view(self._storage.buffer, self.physical_shape,
                                        DTYPES[self.dtype])

    def logical(self) -> np.ndarray:
        return self.physical()[..., :self.shape[-1]]

    # -- synchronization ------------------------------------------------------
    def wait(self) -> "Tensor":
        """Block until the producing operator finished; re-raise its error if it failed."""
        self._check_alive()
        self.event.wait()
        return self

    def _settle(self):
        # delete-time barrier: producer and every pending reader must finish
        self.event._flag.wait()
        for r in self._readers:
            r._flag.wait()
        self._readers = []

    # -- host access ----------------------------------------------------------
    def numpy(self) -> np.ndarray:
        self.wait()
        return np.array(self.logical())

    def item(self) -> float:
        return float(self.numpy().reshape(-1)[0])

    def delete(self) -> int:
        """Return this tensor's memory to the pool; returns bytes released (0 for views)."""
        self._check_alive()
        self._settle()
        self._alive = False
        st = self._storage
        st.refs -= 1
        freed = 0
        if st.refs == 0:
            self.engine.core.pool.release(st.buffer)
            freed = st.buffer.capacity_bytes
        g = self.grad
        if g is not None and g.alive and self.is_param:
            freed += g.delete()
        return freed

    def reshape(self, *new_shape) -> "Tensor":
        if len(new_shape) == 1 and isinstance(new_shape[0], (tuple, list)):
            new_shape = tuple(new_shape[0])
        return self.engine.reshape(self, new_shape)

    def __repr__(self):
        state = self.event.state if self._alive else "deleted"
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, {state})"


class Engine:
    """Operator front-end over an :class:`EngineCore`.

    ``sync`` and ``check`` only change scheduling and validation; results are
    identical under every combination.
    """

    def __init__(self, core: EngineCore | None = None, sync: bool = True, check: bool = True,
                 inplace: bool = True):
        self.core = core or EngineCore(CpuBackend())
        self.backend = self.core.backend
        self.sync = sync
        self.check = check
        self.inplace = inplace
        self._local = threading.local()
        self._streams: list[StreamQueue] = []

    # -- flags ----------------------------------------------------------------
    def set_flags(self, sync: bool | None = None, check: bool | None = None) -> "Engine":
        if sync is not None:
            self.sync = bool(sync)
        if check is not None:
            self.check = bool(check)
        return self

    # -- streams --------------------------------------------------------------
    @property
    def current_stream(self) -> StreamQueue:
        return getattr(self._local, "stream", None) or self.core.default_stream

    def new_stream(self) -> StreamQueue:
        s = self.backend.create_stream()
        self._streams.append(s)
        return s

    @contextlib.contextmanager
    def using_stream(self, stream: StreamQueue):
        prev = getattr(self._local, "stream", None)
        self._local.stream = stream
        try:
            yield stream
        finally:
            self._local.stream = prev

    def synchronize(self):
        for s in [self.core.default_stream, *self._streams]:
            s.synchronize()

    def close(self):
        self.synchronize()
        for s in self._streams:
            if not s.destroyed:
                self.backend.destroy_stream(s)
        self._streams.clear()

    # -- memory ---------------------------------------------------------------
    def pool_stats(self) -> PoolStats:
        return self.core.pool.stats()

    def empty(self, shape, dtype: str = "float32") -> Tensor:
        shape = tuple(int(s) for s in shape)
        if not 1 <= len(shape) <= 4 or any(s < 0 for s in shape):
            raise ShapeError(f"tensor shape must have 1-4 non-negative extents, got {shape}")
        if dtype not in DTYPES:
            raise ArgumentError(f"unsupported dtype {dtype!r}")
        nbytes = math.prod(shape[:-1]) * padded_extent(shape[-1]) * np.dtype(DTYPES[dtype]).itemsize
        buf = self.core.pool.acquire(nbytes)
        t = Tensor(self, shape, dtype, _Storage(buf))
        if not self.core.pool.zero_on_acquire:
            t.physical()[..., shape[-1]:] = 0
        return t

    def zeros(self, shape, dtype: str = "float32") -> Tensor:
        t = self.empty(shape, dtype)
        if not self.core.pool.zero_on_acquire:
            self.fill_(t, 0.0)
        return t

    def tensor(self, values, shape=None, dtype: str = "float32") -> Tensor:
        """Upload host values (row-major, logical order) into a new padded tensor."""
        arr = np.asarray(values)
        shape = tuple(arr.shape) if shape is None else tuple(shape)
        if arr.size != math.prod(shape):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        t = self.empty(shape, dtype)
        host = np.zeros(t.physical_shape, dtype=DTYPES[dtype])
        host[..., :shape[-1]] = arr.reshape(shape)
        t.event = self.core.staged_upload(host, t.buffer, self.current_stream)
        if self.sync:
            t.event.wait()
        return t

    def assign(self, t: Tensor, values) -> Tensor:
        """Overwrite ``t`` in place with host values of the same logical shape."""
        arr = np.asarray(values)
        if arr.size != t.size:
            raise ShapeError(f"{arr.size} values cannot fill shape {t.shape}")
        host = np.zeros(t.physical_shape, dtype=DTYPES[t.dtype])
        host[..., :t.shape[-1]] = arr.reshape(t.shape)
        t._settle()
        t.event = self.core.staged_upload(host, t.buffer, self.current_stream)
        if self.sync:
            t.event.wait()
        return t

    # -- launching ------------------------------------------------------------
    def _launch(self, fn, reads=(), writes=()):
        deps = []
        for t in reads:
            t._check_alive()
            if not t.event.done:
                deps.append(t.event)
        for t in writes:
            t._check_alive()
            if not t.event.done:
                deps.append(t.event)
            deps.extend(_prune(t._readers))

        def run():
            for d in deps:
                d.wait()
            fn()

        ev = self.backend.enqueue(run, self.current_stream)
        for t in reads:
            t._readers = _prune(t._readers)
            t._readers.append(ev)
        for t in writes:
            t.event = ev
        if self.sync:
            ev.wait()
        return ev

    def _validate(self, op, **kw):
        if self.check:
            validate_params(op, **kw)

    def _out(self, like_or_shape, out=None, dtype="float32"):
        if out is not None:
            shape = like_or_shape if isinstance(like_or_shape, tuple) else like_or_shape.shape
            if out.shape != tuple(shape):
                raise ShapeError(f"out tensor shape {out.shape} != expected {tuple(shape)}")
            return out
        shape = like_or_shape if isinstance(like_or_shape, tuple) else like_or_shape.shape
        return self.empty(shape, dtype)

    # -- shape ops ------------------------------------------------------------
    def reshape(self, t: Tensor, new_shape) -> Tensor:
        new_shape = tuple(int(s) for s in new_shape)
        if math.prod(new_shape) != t.size:
            raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
        t._check_alive()
        if new_shape[-1] == t.shape[-1]:
            t._storage.refs += 1
            return Tensor(self, new_shape, t.dtype, t._storage)
        out = self.empty(new_shape, t.dtype)
        src, dst = t.logical(), out.logical()
        self._launch(lambda: dst.__setitem__(Ellipsis, src.reshape(new_shape)), [t], [out])
        return out

    def alias(self, t: Tensor) -> Tensor:
        """A second tensor object over the same storage."""
        t._check_alive()
        t._storage.refs += 1
        return Tensor(self, t.shape, t.dtype, t._storage)

    def copy(self, t: Tensor) -> Tensor:
        out = self.empty(t.shape, t.dtype)
        src, dst = t.logical(), out.logical()
        self._launch(lambda: dst.__setitem__(Ellipsis, src), [t], [out])
        return out

    def fill_(self, t: Tensor, value: float) -> Tensor:
        dst = t.logical()
        self._launch(lambda: dst.__setitem__(Ellipsis, value), [], [t])
        return t

    def to_float(self, t: Tensor) -> Tensor:
        if t.dtype != "int8":
            raise ArgumentError(f"to_float expects an int8 tensor, got {t.dtype}")
        out = self.empty(t.shape, "float32")
        src, dst = t.logical(), out.logical()
        self._launch(lambda: self.backend.elementwise_unary("pix2float", src, dst), [t], [out])
        return out

    # -- dense algebra ----------------------------------------------------------
    def gemm(self, a: Tensor, b: Tensor, transpose_a=False, transpose_b=False,
             bias: Tensor | None = None) -> Tensor:
        self._validate("gemm", a=a.shape, b=b.shape, transpose_a=transpose_a,
                       transpose_b=transpose_b, bias=None if bias is None else bias.shape)
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError("gemm operands must be 2-D")
        m = a.shape[1] if transpose_a else a.shape[0]
        n = b.shape[0] if transpose_b else b.shape[1]
        out = self.empty((m, n))
        av, bv, ov = a.logical(), b.logical(), out.logical()
        biv = None if bias is None else bias.logical()
        reads = [a, b] + ([bias] if bias is not None else [])
        self._launch(lambda: self.backend.gemm(av, bv, ov, transpose_a, transpose_b, biv),
                     reads, [out])
        return out

    def conv2d(self, x: Tensor, w: Tensor, desc: ConvDescriptor,
               bias: Tensor | None = None) -> Tensor:
        self._validate("conv2d", x=x.shape, w=w.shape, desc=desc)
        if x.ndim != 4:
            raise ShapeError(f"conv input must be NHWC, got {x.shape}")
        n, h, wd, _ = x.shape
        oh = max(1, (h + 2 * desc.pad_h - desc.kernel_h) // max(desc.stride_h, 1) + 1)
        ow = max(1, (wd + 2 * desc.pad_w - desc.kernel_w) // max(desc.stride_w, 1) + 1)
        out = self.empty((n, oh, ow, desc.out_channels))
        xv, wv, ov = x.logical(), w.logical(), out.logical()
        bv = None if bias is None else bias.logical()
        reads = [x, w] + ([bias] if bias is not None else [])
        self._launch(lambda: self.backend.conv2d_forward(xv, wv, desc, ov, bv), reads, [out])
        return out

    def conv2d_backward_data(self, dy: Tensor, w: Tensor, desc: ConvDescriptor,
                             x_shape) -> Tensor:
        self._validate("conv2d_backward_data", x=tuple(x_shape), w=w.shape, desc=desc,
                       dy=dy.shape)
        out = self.empty(tuple(x_shape))
        dv, wv, ov = dy.logical(), w.logical(), out.logical()
        self._launch(lambda: self.backend.conv2d_backward_data(dv, wv, desc, ov), [dy, w], [out])
        return out

    def conv2d_backward_filter(self, x: Tensor, dy: Tensor, desc: ConvDescriptor) -> Tensor:
        self._validate("conv2d_backward_filter", x=x.shape, desc=desc, dy=dy.shape)
        out = self.empty(desc.filter_shape)
        xv, dv, ov = x.logical(), dy.logical(), out.logical()
        self._launch(lambda: self.backend.conv2d_backward_filter(xv, dv, desc, ov), [x, dy], [out])
        return out

    # -- normalization ----------------------------------------------------------
    def batchnorm(self, x: Tensor, gamma: Tensor | None, beta: Tensor | None,
                  running_mean: Tensor, running_var: Tensor, training: bool,
                  eps: float, momentum: float, out: Tensor | None = None):
        """Returns (y, saved_mean, saved_inv_std). ``gamma``/``beta`` None means identity affine."""
        c = x.shape[-1]
        self._validate("batchnorm", x=x.shape,
                       gamma=None if gamma is None else gamma.shape,
                       beta=None if beta is None else beta.shape,
                       running_mean=running_mean.shape, running_var=running_var.shape,
                       eps=eps, momentum=momentum)
        y = self._out(x, out)
        mean, inv_std = self.empty((c,)), self.empty((c,))
        g = np.ones(c, np.float32) if gamma is None else gamma.logical()
        b = np.zeros(c, np.float32) if beta is None else beta.logical()
        xv, yv = x.logical(), y.logical()
        rm, rv, mv, iv = running_mean.logical(), running_var.logical(), mean.logical(), inv_std.logical()
        reads = [x] + [t for t in (gamma, beta) if t is not None]
        writes = [y, mean, inv_std, running_mean, running_var]
        if y is x:
            reads = reads[1:]
        self._launch(lambda: self.backend.batchnorm_forward(
            xv, g, b, rm, rv, yv, mv, iv, training, eps, momentum), reads, writes)
        return y, mean, inv_std

    def batchnorm_backward(self, dy: Tensor, x: Tensor, gamma: Tensor | None,
                           saved_mean: Tensor, saved_inv_std: Tensor):
        c = x.shape[-1]
        self._validate("batchnorm_backward", x=x.shape, dy=dy.shape,
                       gamma=None if gamma is None else gamma.shape)
        dx, dgamma, dbeta = self.empty(x.shape), self.empty((c,)), self.empty((c,))
        g = np.ones(c, np.float32) if gamma is None else gamma.logical()
        views = (dy.logical(), x.logical(), g, saved_mean.logical(), saved_inv_std.logical(),
                 dx.logical(), dgamma.logical(), dbeta.logical())
        reads = [dy, x, saved_mean, saved_inv_std] + ([gamma] if gamma is not None else [])
        self._launch(lambda: self.backend.batchnorm_backward(*views), reads, [dx, dgamma, dbeta])
        return dx, dgamma, dbeta

    # -- pooling ----------------------------------------------------------------
    def maxpool2d(self, x: Tensor, window=(2, 2), stride=None, pad=0,
                  adaptive_target: int | None = None):
        """Returns (y, argmax) where argmax holds flat logical input indices."""
        window = (window, window) if isinstance(window, int) else tuple(window)
        stride = window if stride is None else ((stride, stride) if isinstance(stride, int)
                                                else tuple(stride))
        self._validate("maxpool2d", x=x.shape, window=window, stride=stride, pad=pad,
                       adaptive_target=adaptive_target)
        if x.ndim != 4:
            raise ShapeError(f"max pool input must be NHWC, got {x.shape}")
        n, h, w, c = x.shape
        oh, ow = K.pool_output_hw(h, w, window, stride, pad, adaptive_target)
        y = self.empty((n, oh, ow, c))
        idx = self.empty((n, oh, ow, c), "int32")
        xv, yv, iv = x.logical(), y.logical(), idx.logical()
        self._launch(lambda: self.backend.maxpool2d_forward(
            xv, yv, iv, window, stride, pad, adaptive_target), [x], [y, idx])
        return y, idx

    def maxpool2d_backward(self, dy: Tensor, argmax: Tensor, input_shape) -> Tensor:
        if dy.shape != argmax.shape:
            raise ShapeError(f"max pool backward: dy {dy.shape} vs argmax {argmax.shape}")
        out = self.empty(tuple(input_shape))
        dv, iv, ov = dy.logical(), argmax.logical(), out.logical()
        self._launch(lambda: self.backend.maxpool2d_backward(dv, iv, ov), [dy, argmax], [out])
        return out

    # -- element-wise -----------------------------------------------------------
    def _unary(self, code, x: Tensor, aux: Tensor | None = None, alpha=0.0,
               out: Tensor | None = None) -> Tensor:
        self._validate("unary", code=code, x=x.shape, aux=None if aux is None else aux.shape,
                       needs_aux=code.endswith("_bwd"))
        y = self._out(x, out)
        xv, yv = x.logical(), y.logical()
        av = None if aux is None else aux.logical()
        reads = [t for t in (x, aux) if t is not None and t is not y]
        self._launch(lambda: self.backend.elementwise_unary(code, xv, yv, av, alpha), reads, [y])
        return y

    def leaky_relu(self, x, k=0.01, out=None):
        return self._unary("leaky_relu_fwd", x, alpha=k, out=out)

    def leaky_relu_backward(self, dy, y, k=0.01, out=None):
        return self._unary("leaky_relu_bwd", dy, aux=y, alpha=k, out=out)

    def sigmoid(self, x, out=None):
        return self._unary("sigmoid_fwd", x, out=out)

    def sigmoid_backward(self, dy, y, out=None):
        return self._unary("sigmoid_bwd", dy, aux=y, out=out)

    def scale(self, x, a, out=None):
        return self._unary("scale", x, alpha=a, out=out)

    def _binary(self, code, x1: Tensor, x2: Tensor, out=None) -> Tensor:
        self._validate(code, x1=x1.shape, x2=x2.shape)
        y = self._out(x1, out)
        v1, v2, vy = x1.logical(), x2.logical(), y.logical()
        reads = [t for t in (x1, x2) if t is not y]
        self._launch(lambda: self.backend.elementwise_binary(code, v1, v2, vy), reads, [y])
        return y

    def add(self, x1, x2, out=None):
        return self._binary("add", x1, x2, out)

    def mul(self, x1, x2, out=None):
        return self._binary("mul", x1, x2, out)

    def reduce_field_sum(self, x: Tensor) -> Tensor:
        self._validate("reduce_field_sum", x=x.shape)
        out = self.empty((x.shape[-1],))
        xv, ov = x.logical(), out.logical()
        self._launch(lambda: self.backend.reduce_field_sum(xv, ov), [x], [out])
        return out

    # -- loss -------------------------------------------------------------------
    def softmax_crossentropy(self, logits: Tensor, onehot: Tensor):
        """Returns (loss tensor of shape [1], dlogits)."""
        self._validate("softmax_crossentropy", logits=logits.shape, onehot=onehot.shape)
        loss = self.empty((1,))
        grad = self.empty(logits.shape)
        lv, yv, gv, outv = logits.logical(), onehot.logical(), grad.logical(), loss.logical()
        check = self.check

        def run():
            outv[0] = self.backend.softmax_crossentropy(lv, yv, gv, check_labels=check)

        self._launch(run, [logits, onehot], [loss, grad])
        return loss, grad

    # -- optimizers -------------------------------------------------------------
    def adam_step(self, param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self._validate("adam_step", param=param.shape, grad=grad.shape, m=m.shape, v=v.shape)
        views = (param.logical(), grad.logical(), m.logical(), v.logical())
        self._launch(lambda: self.backend.adam_step(*views, t, lr, beta1, beta2, eps),
                     [grad], [param, m, v])
        return param

    def sgd_step(self, param, grad, lr):
        self._validate("sgd_step", param=param.shape, grad=grad.shape)
        pv, gv = param.logical(), grad.logical()
        self._launch(lambda: self.backend.sgd_step(pv, gv, lr), [grad], [param])
        return param

    def uniform_fill(self, t: Tensor, low: float, high: float, seed) -> Tensor:
        self._validate("uniform_fill", low=low, high=high)
        tv = t.logical()
        self._launch(lambda: self.backend.uniform_fill(tv, low, high, seed), [], [t])
        return t


def cpu_engine(sync: bool = True, check: bool = True, conv_threshold: int | None = None,
               memory_limit: int | None = None, **core_kw) -> Engine:
    kw = {}
    if conv_threshold is not None:
        kw["small_feature_threshold"] = conv_threshold
    backend = CpuBackend(memory_limit=memory_limit, **kw)
    return Engine(EngineCore(backend, **core_kw), sync=sync, check=check)
