"""Layer catalog: convolution, normalization, dense, pooling, activations, composition."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import IN_PLACE, Module, Node, Unit, alias, as_tensor_list, in_place_request
from .backend.base import AUTO, ConvDescriptor
from .errors import ArgumentError, ShapeError
from .tensor import Tensor
from .trainkit.init import conv_fan_in, kaiming_uniform_

BN_EPS = 1e-8
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.01


def _accumulate(grad: Tensor, delta: Tensor) -> None:
    grad.engine.add(grad, delta, out=grad)
    delta.delete()


class Conv3D(Unit):
    """2-D spatial convolution on NHWC tensors, filters laid out [out, k, k, in]."""

    def __init__(self, bias: bool, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, algorithm: str = AUTO):
        super().__init__()
        if kernel <= 0 or stride <= 0 or padding < 0 or in_channels <= 0 or out_channels <= 0:
            raise ArgumentError(
                f"conv3D: need positive channels/kernel/stride and padding >= 0, got "
                f"in={in_channels} out={out_channels} k={kernel} s={stride} p={padding}")
        self.bias = bias
        self.desc = ConvDescriptor.square(in_channels, out_channels, kernel, stride, padding,
                                          algorithm)

    def _declare_params(self, eg, seed):
        w = self.add_param("weight", eg.empty(self.desc.filter_shape))
        kaiming_uniform_(w, conv_fan_in(self.desc.filter_shape), seed)
        if self.bias:
            self.add_param("bias", eg.zeros((self.desc.out_channels,)))

    def _forward(self, node: Node, x):
        node.save(x)
        return self.engine.conv2d(x, self._params["weight"], self.desc, self._params.get("bias"))

    def _backward(self, node: Node, dy):
        eg = self.engine
        x = node.saved[0]
        w = self._params["weight"]
        _accumulate(w.grad, eg.conv2d_backward_filter(x, dy, self.desc))
        if self.bias:
            b = self._params["bias"]
            _accumulate(b.grad, eg.reduce_field_sum(dy))
        return [eg.conv2d_backward_data(dy, w, self.desc, x.shape)]

    def extra_repr(self):
        d = self.desc
        return (f"bias={self.bias}, {d.in_channels}->{d.out_channels}, k={d.kernel_h}, "
                f"s={d.stride_h}, p={d.pad_h}")


class BatchNorm(Unit):
    """Per-channel normalization over every axis but the last."""

    def __init__(self, affine: bool = True, channels: int = 0, eps: float = BN_EPS,
                 momentum: float = BN_MOMENTUM):
        super().__init__()
        if channels < 1:
            raise ArgumentError(f"batchNorm: channels must be >= 1, got {channels}")
        self.affine = affine
        self.channels = channels
        self.eps = eps
        self.momentum = momentum

    def _declare_params(self, eg, seed):
        c = self.channels
        if self.affine:
            self.add_param("gamma", eg.tensor(np.ones(c, np.float32)))
            self.add_param("beta", eg.zeros((c,)))
        self.add_buffer("running_mean", eg.zeros((c,)))
        self.add_buffer("running_var", eg.tensor(np.ones(c, np.float32)))

    def _forward(self, node: Node, x):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batchNorm: input has {x.shape[-1]} channels, "
                             f"unit expects {self.channels} (channel-mismatch)")
        p, b = self._params, self._buffers
        y, mean, inv_std = self.engine.batchnorm(
            x, p.get("gamma"), p.get("beta"), b["running_mean"], b["running_var"],
            self.training, self.eps, self.momentum)
        node.save(x)
        node.keep(mean, inv_std)
        return y

    def _backward(self, node: Node, dy):
        x = node.saved[0]
        mean, inv_std = node.aux
        dx, dg, db = self.engine.batchnorm_backward(dy, x, self._params.get("gamma"), mean, inv_std)
        if self.affine:
            _accumulate(self._params["gamma"].grad, dg)
            _accumulate(self._params["beta"].grad, db)
        else:
            dg.delete()
            db.delete()
        return [dx]

    def extra_repr(self):
        return f"affine={self.affine}, channels={self.channels}"


class FullConnect(Unit):
    """y = x W + b with W stored [in, out]."""

    def __init__(self, bias: bool, in_features: int, out_features: int):
        super().__init__()
        if in_features <= 0 or out_features <= 0:
            raise ArgumentError(f"fullconnect: features must be positive, got "
                                f"{in_features}->{out_features}")
        self.bias = bias
        self.in_features = in_features
        self.out_features = out_features

    def _declare_params(self, eg, seed):
        w = self.add_param("weight", eg.empty((self.in_features, self.out_features)))
        kaiming_uniform_(w, self.in_features, seed)
        if self.bias:
            self.add_param("bias", eg.zeros((self.out_features,)))

    def _forward(self, node: Node, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"fullconnect: expected [N, {self.in_features}], got {list(x.shape)}")
        node.save(x)
        return self.engine.gemm(x, self._params["weight"], bias=self._params.get("bias"))

    def _backward(self, node: Node, dy):
        eg = self.engine
        x = node.saved[0]
        w = self._params["weight"]
        _accumulate(w.grad, eg.gemm(x, dy, transpose_a=True))
        if self.bias:
            _accumulate(self._params["bias"].grad, eg.reduce_field_sum(dy))
        return [eg.gemm(dy, w, transpose_b=True)]

    def extra_repr(self):
        return f"bias={self.bias}, {self.in_features}->{self.out_features}"


class MaxPool2D(Unit):
    def __init__(self, window=2, stride=None, padding: int = 0, adaptive_target: int | None = None):
        super().__init__()
        if adaptive_target is not None and adaptive_target < 1:
            raise ArgumentError(f"adaptive max pool: target must be >= 1, got {adaptive_target}")
        self.window = window
        self.stride = stride
        self.padding = padding
        self.adaptive_target = adaptive_target

    def _forward(self, node: Node, x):
        y, idx = self.engine.maxpool2d(x, self.window, self.stride, self.padding,
                                       self.adaptive_target)
        node.keep(idx)
        node.ctx["shape"] = x.shape
        return y

    def _backward(self, node: Node, dy):
        return [self.engine.maxpool2d_backward(dy, node.aux[0], node.ctx["shape"])]

    def extra_repr(self):
        if self.adaptive_target is not None:
            return f"adaptive_target={self.adaptive_target}"
        return f"window={self.window}, stride={self.stride}, padding={self.padding}"


class AdaptiveMaxPool2D(MaxPool2D):
    def __init__(self, target: int):
        super().__init__(adaptive_target=target)


class _Activation(Unit):
    """Element-wise activation; may overwrite its input when it is the sole consumer."""

    def _fwd(self, x, out): ...

    def _bwd(self, dy, y, out): ...

    def _forward(self, node: Node, x):
        if in_place_request(self, x) == IN_PLACE:
            y = self._fwd(x, alias(x))
            x.overwritten = True
        else:
            y = self._fwd(x, None)
        node.save(y)
        return y

    def _backward(self, node: Node, dy):
        y = node.saved[0]
        out = alias(dy) if self.inplace and node.pass_.mutable(dy) else None
        return [self._bwd(dy, y, out)]


class LeakyRelu(_Activation):
    def __init__(self, k: float = LEAKY_SLOPE, inplace: bool = True):
        super().__init__()
        self.k = k
        self.inplace = inplace

    def _fwd(self, x, out):
        return self.engine.leaky_relu(x, self.k, out=out)

    def _bwd(self, dy, y, out):
        return self.engine.leaky_relu_backward(dy, y, self.k, out=out)

    def extra_repr(self):
        return f"k={self.k}"


class Sigmoid(_Activation):
    def __init__(self, inplace: bool = True):
        super().__init__()
        self.inplace = inplace

    def _fwd(self, x, out):
        return self.engine.sigmoid(x, out=out)

    def _bwd(self, dy, y, out):
        return self.engine.sigmoid_backward(dy, y, out=out)


class Add(Unit):
    def _forward(self, node: Node, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {list(a.shape)} and {list(b.shape)} differ")
        return self.engine.add(a, b)

    def _backward(self, node: Node, dy):
        return [dy, dy]


class Flatten(Unit):
    """[N, ...] -> [N, prod(...)]; a zero-copy view when the last extent is unchanged."""

    def _forward(self, node: Node, x):
        node.ctx["shape"] = x.shape
        return self.engine.reshape(x, (x.shape[0], math.prod(x.shape[1:])))

    def _backward(self, node: Node, dy):
        return [self.engine.reshape(dy, node.ctx["shape"])]


class Sequence(Module):
    def __init__(self, *units: Unit):
        super().__init__()
        for i, u in enumerate(units):
            setattr(self, str(i), u)

    def __forward__(self, *xs):
        out = list(xs)
        for _, u in self.children():
            out = u.forward(*out)
        return out

    def __len__(self):
        return len(self._children)

    def __getitem__(self, i) -> Unit:
        return list(self._children.values())[i]


# -- constructors, with camelCase aliases ------------------------------------------

def conv3d(bias: bool, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
           padding: int = 0, algorithm: str = AUTO) -> Conv3D:
    return Conv3D(bias, in_channels, out_channels, kernel, stride, padding, algorithm)


def batch_norm(*args, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> BatchNorm:
    """``batch_norm(channels)`` or ``batch_norm(affine, channels)``; affine defaults to True."""
    if len(args) == 1:
        affine, channels = True, args[0]
    elif len(args) == 2:
        affine, channels = args
    else:
        raise ArgumentError("batchNorm takes (channels) or (affine, channels)")
    if isinstance(channels, bool) or not isinstance(channels, (int, np.integer)):
        raise ArgumentError(f"batchNorm: channels must be an integer, got {channels!r}")
    return BatchNorm(bool(affine), int(channels), eps, momentum)


def fullconnect(bias: bool, in_features: int, out_features: int) -> FullConnect:
    return FullConnect(bias, in_features, out_features)


def max_pool2d(window=2, stride=None, padding: int = 0) -> MaxPool2D:
    return MaxPool2D(window, stride, padding)


def adaptive_max_pool2d(target: int) -> AdaptiveMaxPool2D:
    return AdaptiveMaxPool2D(target)


def leaky_relu(k: float = LEAKY_SLOPE, inplace: bool = True) -> LeakyRelu:
    return LeakyRelu(k, inplace)


def sigmoid(inplace: bool = True) -> Sigmoid:
    return Sigmoid(inplace)


def flatten() -> Flatten:
    return Flatten()


def add() -> Add:
    return Add()


def sequence(*units: Unit) -> Sequence:
    return Sequence(*units)


conv3D = conv3d
batchNorm = batch_norm


class F:
    """Functional forms: each call runs a transient parameter-free unit on the input's engine."""

    @staticmethod
    def _run(unit: Unit, *xs):
        ts = as_tensor_list(xs)
        if not ts:
            raise ArgumentError("functional op needs at least one tensor")
        unit.engine = ts[0].engine
        return unit.forward(*ts)

    @staticmethod
    def leaky_relu(x, k: float = LEAKY_SLOPE, inplace: bool = True) -> list[Tensor]:
        return F._run(LeakyRelu(k, inplace), x)

    @staticmethod
    def sigmoid(x, inplace: bool = True) -> list[Tensor]:
        return F._run(Sigmoid(inplace), x)

    @staticmethod
    def add(a, b) -> list[Tensor]:
        return F._run(Add(), a, b)

    @staticmethod
    def flatten(x) -> list[Tensor]:
        return F._run(Flatten(), x)

    @staticmethod
    def max_pool2d(x, window=2, stride=None, padding: int = 0) -> list[Tensor]:
        return F._run(MaxPool2D(window, stride, padding), x)

    @staticmethod
    def adaptive_max_pool2d(target: int, x) -> list[Tensor]:
        return F._run(AdaptiveMaxPool2D(target), x)

    leakyRelu = leaky_relu
    adaptive_maxPool2D = adaptive_max_pool2d
