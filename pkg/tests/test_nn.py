import numpy as np
import pytest

import oracles
from conftest import f32, unit_gradcheck
from tensorforge import nn
from tensorforge.autodiff import Module
from tensorforge.backend import GENERAL_IM2COL, SMALL_FEATURE_DIRECT
from tensorforge.errors import ArgumentError, ShapeError
from tensorforge.models import ResNetSmall
from tensorforge.nn import F

TOL = 1e-3


@pytest.mark.parametrize("bias", [False, True])
@pytest.mark.parametrize("algo", [GENERAL_IM2COL, SMALL_FEATURE_DIRECT])
def test_conv_gradcheck_fixed_case(eg, rng, bias, algo):
    u = nn.conv3d(bias, 2, 3, 3, 1, 1, algorithm=algo).init(eg, 1)
    names = ["weight", "bias"] if bias else ["weight"]
    fn = (lambda x, w, b: oracles.conv2d(x, w, 1, 1, b)) if bias else \
        (lambda x, w: oracles.conv2d(x, w, 1, 1))
    fwd, errs = unit_gradcheck(eg, u, [rng.standard_normal((1, 4, 4, 2))], fn, names, rng)
    assert fwd < 1e-5 and max(errs) < TOL


def test_conv_resnet_stem_shapes(eg):
    u = nn.conv3D(False, 3, 64, 3, 1, 1).init(eg)
    assert u.forward(eg.zeros((2, 32, 32, 3)))[0].shape == (2, 32, 32, 64)
    u = nn.conv3D(False, 64, 128, 3, 2, 1).init(eg)
    assert u.forward(eg.zeros((2, 32, 32, 64)))[0].shape == (2, 16, 16, 128)


def test_conv_rejects_bad_hyperparams():
    with pytest.raises(ArgumentError):
        nn.conv3d(False, 3, 4, 0)
    with pytest.raises(ArgumentError):
        nn.conv3d(False, 3, 4, 3, 1, -1)


def test_conv_fused_bias_equals_separate_add(eg, rng):
    u = nn.conv3d(True, 2, 3, 3, 1, 1).init(eg, 0)
    eg.assign(u._params["bias"], f32([0.5, -1.0, 2.0]))
    x = eg.tensor(f32(rng.standard_normal((1, 4, 4, 2))))
    fused = u.forward(x)[0].numpy()
    w = u._params["weight"]
    plain = eg.conv2d(x, w, u.desc).numpy()
    # the fused add happens before the float32 store, so agreement is to rounding, not bits
    sep = plain.astype(np.float64) + [0.5, -1.0, 2.0]
    scale = np.abs(sep).max()
    assert np.abs(fused - sep).max() <= 1e-6 * scale
    ref = oracles.conv2d(x.numpy(), w.numpy(), 1, 1, [0.5, -1.0, 2.0])
    assert np.abs(fused - ref).max() <= 1e-6 * scale


def test_batchnorm_gradcheck(eg, rng):
    u = nn.batch_norm(True, 3).init(eg, 0)
    fwd, errs = unit_gradcheck(eg, u, [rng.standard_normal((4, 2, 2, 3))],
                               lambda x, g, b: oracles.batchnorm_train(x, g, b), ["gamma", "beta"], rng)
    assert fwd < 1e-5 and max(errs) < TOL


def test_batchnorm_defaults_and_forms():
    bn = nn.batchNorm(4)
    assert bn.affine and bn.eps == 1e-8 and bn.momentum == 0.1
    assert not nn.batchNorm(False, 4).affine
    with pytest.raises(ArgumentError):
        nn.batch_norm(0)


def test_batchnorm_inference_initial_stats(eg, rng):
    u = nn.batch_norm(True, 3).init(eg).eval()
    x = f32(rng.standard_normal((2, 2, 2, 3)))
    y = u.forward(eg.tensor(x))[0].numpy()
    assert np.allclose(y, x / np.sqrt(1 + 1e-8), atol=1e-7)


def test_batchnorm_train_normalizes_and_updates_running_mean(eg, rng):
    u = nn.batch_norm(True, 3).init(eg)
    x = f32(rng.standard_normal((8, 4, 4, 3)) * 3 + 5)
    y = u.forward(eg.tensor(x))[0].numpy()
    axes = (0, 1, 2)
    assert np.abs(y.mean(axis=axes)).max() <= 1e-3
    assert np.abs(y.var(axis=axes) - 1).max() <= 1e-2
    rm = u._buffers["running_mean"].numpy()
    assert np.allclose(rm, 0.1 * x.astype(np.float64).mean(axis=axes), atol=1e-5)


def test_batchnorm_channel_mismatch(eg):
    u = nn.batch_norm(3).init(eg)
    with pytest.raises(ShapeError, match="channel"):
        u.forward(eg.zeros((2, 2, 2, 4)))


def test_fullconnect_gradcheck_and_identity(eg, rng):
    u = nn.fullconnect(True, 5, 4).init(eg, 0)
    fwd, errs = unit_gradcheck(eg, u, [rng.standard_normal((3, 5))], oracles.fullconnect,
                               ["weight", "bias"], rng)
    assert fwd < 1e-5 and max(errs) < TOL
    ident = nn.fullconnect(True, 3, 3).init(eg)
    eg.assign(ident._params["weight"], np.eye(3, dtype=np.float32))
    x = f32(rng.standard_normal((2, 3)))
    assert np.array_equal(ident.forward(eg.tensor(x))[0].numpy(), x)
    assert nn.fullconnect(True, 256, 10).init(eg).forward(eg.zeros((4, 256)))[0].shape == (4, 10)
    with pytest.raises(ShapeError):
        ident.forward(eg.zeros((2, 4)))


def test_pool_gradchecks(eg, rng):
    u = nn.max_pool2d(2).init(eg)
    fwd, errs = unit_gradcheck(eg, u, [rng.standard_normal((2, 4, 4, 3))],
                               lambda x: oracles.maxpool(x, 2, 2), (), rng)
    assert fwd == 0 and max(errs) < TOL
    a = nn.adaptive_max_pool2d(2).init(eg)
    fwd, errs = unit_gradcheck(eg, a, [rng.standard_normal((1, 5, 5, 2))],
                               lambda x: oracles.adaptive_maxpool(x, 2), (), rng)
    assert fwd == 0 and max(errs) < TOL


def test_adaptive_pool_global_and_identity(eg, rng):
    x = eg.tensor(f32(rng.standard_normal((2, 8, 8, 256))))
    assert F.adaptive_maxPool2D(1, x)[0].shape == (2, 1, 1, 256)
    y = eg.tensor(f32(rng.standard_normal((1, 3, 3, 2))))
    assert np.array_equal(F.adaptive_max_pool2d(3, y)[0].numpy(), y.numpy())
    with pytest.raises(ArgumentError):
        nn.adaptive_max_pool2d(0)


@pytest.mark.parametrize("make,ref", [
    (lambda: nn.leaky_relu(0.01), lambda x: oracles.leaky_relu(x, 0.01)),
    (lambda: nn.sigmoid(), oracles.sigmoid),
])
def test_activation_gradchecks(eg, rng, make, ref):
    fwd, errs = unit_gradcheck(eg, make().init(eg), [rng.standard_normal((2, 3, 5))], ref, (), rng)
    assert fwd < 1e-6 and max(errs) < TOL


def test_functional_equals_unit_form(eg, rng):
    x = f32(rng.standard_normal((3, 7)))
    a = F.leakyRelu(eg.tensor(x))[0].numpy()
    b = nn.leaky_relu().init(eg).forward(eg.tensor(x))[0].numpy()
    assert np.array_equal(a, b)


def test_add_gradient_is_one_on_both_branches(eg):
    class Sum(Module):
        def __forward__(self, a, b):
            return F.add(a, b)

    m = Sum().init(eg)
    a, b = eg.tensor([1.0, 2.0]), eg.tensor([3.0, 4.0])
    assert m.forward(a, b)[0].numpy().tolist() == [4.0, 6.0]
    da, db = m.backward(eg.tensor([1.0, 1.0]))
    assert da.numpy().tolist() == [1.0, 1.0] and db.numpy().tolist() == [1.0, 1.0]
    with pytest.raises(ShapeError):
        F.add(eg.zeros((2,)), eg.zeros((3,)))


def test_flatten_is_a_view_for_pooled_features(eg, rng):
    x = eg.tensor(f32(rng.standard_normal((2, 1, 1, 256))))
    y = F.flatten(x)[0]
    assert y.shape == (2, 256) and y.buffer == x.buffer


def test_sequence_is_composition(eg, rng):
    conv = nn.conv3d(False, 2, 3, 3, 1, 1)
    bn = nn.batch_norm(3)
    seq = nn.sequence(conv, bn).init(eg, 0)
    x = eg.tensor(f32(rng.standard_normal((2, 4, 4, 2))))
    y = seq.forward(x)[0].numpy()
    conv2, bn2 = nn.conv3d(False, 2, 3, 3, 1, 1), nn.batch_norm(3)

    class Manual(Module):
        def __init__(self):
            super().__init__()
            self.a, self.b = conv2, bn2

        def __forward__(self, x):
            return self.b.forward(self.a.forward(x))

    Manual().init(eg, 0)
    eg.assign(conv2._params["weight"], conv._params["weight"].numpy())
    m = Manual()
    m.a, m.b = conv2, bn2
    m.engine = eg
    assert np.array_equal(m.forward(x)[0].numpy(), y)
    assert len(seq) == 2 and seq[0] is conv


def test_layers_are_pure(eg, rng):
    net = ResNetSmall().init(eg, 0).eval()
    x = eg.tensor(f32(rng.random((2, 8, 8, 3))))
    a = net.forward(x)[0].numpy()
    b = net.forward(x)[0].numpy()
    assert np.array_equal(a, b)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_resnet_shape_chain_any_batch(eg, n):
    net = ResNetSmall().init(eg, 0)
    assert net.forward(eg.zeros((n, 32, 32, 3)))[0].shape == (n, 10)
