"""Model zoo for the training harness."""

from __future__ import annotations

from . import nn
from .autodiff import Module
from .errors import ArgumentError
from .nn import F


class Block(Module):
    """Residual block: conv-bn-leaky main path, optional conv-bn projection on the shortcut."""

    def __init__(self, in_channel: int, out_channel: int, stride: int):
        super().__init__()
        self.conv1 = nn.conv3D(False, in_channel, out_channel, 3, stride, 1)
        self.bn1 = nn.batchNorm(False, out_channel)
        self.downsample = None
        if stride != 1 or out_channel != in_channel:
            self.downsample = nn.sequence(
                nn.conv3D(False, in_channel, out_channel, 3, stride, 1),
                nn.batchNorm(out_channel))

    def __forward__(self, *X):
        res = X
        X = F.leakyRelu(self.bn1.forward(self.conv1.forward(*X)))
        if self.downsample is not None:
            res = self.downsample.forward(*res)
        X = F.add(X[0], res[0])
        return F.leakyRelu(X)


class ResNetSmall(Module):
    """[N,32,32,3] -> 64ch -> Block(64,128,2) -> Block(128,256,2) -> global max -> fc 10."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.conv3D(False, 3, 64, 3, 1, 1)
        self.bn1 = nn.batchNorm(False, 64)
        self.block1 = Block(64, 128, 2)
        self.block2 = Block(128, 256, 2)
        self.fc = nn.fullconnect(True, 256, 10)

    def __forward__(self, *X):
        X = self.bn1.forward(self.conv1.forward(*X))
        X = F.leakyRelu(X)
        X = self.block1.forward(X)
        X = self.block2.forward(X)
        X = F.adaptive_maxPool2D(1, X)
        return self.fc.forward(F.flatten(X))


def _conv_bn(cin, cout):
    return [nn.conv3D(False, cin, cout, 3, 1, 1), nn.batchNorm(cout), nn.leaky_relu()]


class AlexNetSmall(Module):
    """Five 3x3 convs with batch norm and three 2x2 max pools, then two dense layers.

    32x32 -> 16x16 -> 8x8 -> 4x4; widths 32, 64, 128, 128, 64; dense 1024 -> 128 -> 10.
    """

    def __init__(self):
        super().__init__()
        self.features = nn.sequence(
            *_conv_bn(3, 32), nn.max_pool2d(2),
            *_conv_bn(32, 64), nn.max_pool2d(2),
            *_conv_bn(64, 128),
            *_conv_bn(128, 128),
            *_conv_bn(128, 64), nn.max_pool2d(2),
            nn.flatten())
        self.classifier = nn.sequence(
            nn.fullconnect(True, 4 * 4 * 64, 128), nn.batchNorm(128), nn.leaky_relu(),
            nn.fullconnect(True, 128, 10))

    def __forward__(self, *X):
        return self.classifier.forward(self.features.forward(*X))


MODELS = {"fig2_resnet": ResNetSmall, "alexnet_small": AlexNetSmall}


def build_model(name: str, eg=None, seed: int = 0) -> Module:
    """Construct ``name``; when an engine is given, also initialize it with ``seed``."""
    try:
        cls = MODELS[name]
    except KeyError:
        raise ArgumentError(f"unknown net {name!r} (choose from {', '.join(MODELS)})") from None
    m = cls()
    if eg is not None:
        m.train().init(eg, seed)
    return m
