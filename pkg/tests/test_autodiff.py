import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import f32
from tensorforge import nn
from tensorforge.autodiff import COPY, IN_PLACE, Module, Unit, in_place_request
from tensorforge.errors import GraphError, ShapeError, StateError
from tensorforge.models import Block, ResNetSmall
from tensorforge.nn import F
from tensorforge.tensor import Engine, cpu_engine


class Identity(Module):
    def __forward__(self, x):
        return x


class Twice(Module):
    def __forward__(self, x):
        return F.add(x, x)


class Chain(Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.conv3d(False, 2, 3, 3, 1, 1)
        self.act = nn.leaky_relu()

    def __forward__(self, x):
        return self.act.forward(self.conv.forward(x))


class Probe(Unit):
    """Records the in-place decision it would get for its input."""

    def _forward(self, node, x):
        self.decision = in_place_request(self, x)
        return self.engine.scale(x, 1.0)

    def _backward(self, node, dy):
        return [dy]


class Fan(Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.conv3d(False, 2, 2, 1, 1, 0)
        self.probe = Probe()
        self.other = nn.sigmoid()

    def __forward__(self, x):
        h = self.conv.forward(x)
        a = self.probe.forward(h)
        b = self.other.forward(h)
        return F.add(a, b)


def test_identity_module_passes_gradient_through(eg):
    m = Identity().init(eg)
    x = eg.tensor([1.0, 2.0])
    (y,) = m.forward(x)
    assert y is x
    g = eg.tensor([3.0, 4.0])
    assert m.backward(g)[0].numpy().tolist() == [3.0, 4.0]


def test_fanout_expected_count_and_double_gradient(eg):
    m = Twice().init(eg)
    x = eg.tensor(f32([0.5, -1.5, 2.0]))
    m.forward(x)
    assert m.graph.consumers(x) == 2
    g = f32([0.1, 0.7, -3.3])
    dx = m.backward(eg.tensor(g))[0].numpy()
    assert np.array_equal(dx, 2 * g)


def test_backward_requires_forward_and_matching_shapes(eg):
    m = Twice().init(eg)
    with pytest.raises(GraphError):
        m.backward(eg.zeros((3,)))
    m.forward(eg.zeros((3,)))
    with pytest.raises(ShapeError):
        m.backward(eg.zeros((4,)))


def test_uninitialized_module_state_error():
    with pytest.raises(StateError):
        Chain().params()
    with pytest.raises(StateError):
        Chain().forward()


def test_recycle_twice_and_reuse_after_recycle(eg):
    m = Chain().init(eg, 0)
    x = eg.tensor(f32(np.ones((1, 3, 3, 2))))
    (y,) = m.forward(x)
    m.backward(eg.tensor(f32(np.ones(y.shape))))
    assert m.gc() > 0
    assert m.gc() == 0
    other = Chain().init(eg, 1)
    with pytest.raises(GraphError):
        other.forward(y)


def test_gc_during_backward_is_graph_error(eg):
    class Sneaky(Unit):
        def _forward(self, node, x):
            return self.engine.scale(x, 1.0)

        def _backward(self, node, dy):
            self.root.gc()
            return [dy]

    class Wrap(Module):
        def __init__(self):
            super().__init__()
            self.s = Sneaky()

        def __forward__(self, x):
            return self.s.forward(x)

    m = Wrap().init(eg)
    m.s.root = m
    m.forward(eg.zeros((2,)))
    with pytest.raises(GraphError):
        m.backward(eg.zeros((2,)))


def test_new_edge_after_forward_is_detected(eg):
    m = Chain().init(eg, 0)
    (y,) = m.forward(eg.tensor(f32(np.ones((1, 3, 3, 2)))))
    F.sigmoid(y, inplace=False)
    with pytest.raises(GraphError, match="changed"):
        m.backward(eg.zeros(y.shape))


def test_deleting_saved_tensor_is_detected(eg):
    m = Chain().init(eg, 0)
    x = eg.tensor(f32(np.ones((1, 3, 3, 2))))
    (y,) = m.forward(x)
    x.delete()
    with pytest.raises(GraphError, match="deleted"):
        m.backward(eg.zeros(y.shape))


def test_overwritten_input_cannot_be_reused(eg):
    class Reuse(Module):
        def __init__(self):
            super().__init__()
            self.conv = nn.conv3d(False, 1, 1, 1)

        def __forward__(self, x):
            h = self.conv.forward(x)
            a = F.leaky_relu(h)
            return F.add(a, h)

    m = Reuse().init(eg)
    m.forward(eg.zeros((1, 2, 2, 1)))
    m.forward(eg.zeros((1, 2, 2, 1)))
    assert not any(n.inputs[0].overwritten for n in m.graph.nodes)


def test_graph_divergence_after_in_place_grant_is_graph_error(eg):
    class Switch(Module):
        def __init__(self):
            super().__init__()
            self.conv = nn.conv3d(False, 1, 1, 1)
            self.extra = False

        def __forward__(self, x):
            h = self.conv.forward(x)
            a = F.leaky_relu(h)
            return F.add(a, h) if self.extra else a

    m = Switch().init(eg)
    m.forward(eg.zeros((1, 2, 2, 1)))
    m.extra = True
    with pytest.raises(GraphError, match="overwritten"):
        m.forward(eg.zeros((1, 2, 2, 1)))


def test_params_order_is_hierarchical_and_stable(eg):
    net = ResNetSmall().init(eg, 0)
    names = [n for n, _ in net.named_params()]
    assert names == [
        "conv1.weight",
        "block1.conv1.weight", "block1.downsample.0.weight",
        "block1.downsample.1.gamma", "block1.downsample.1.beta",
        "block2.conv1.weight", "block2.downsample.0.weight",
        "block2.downsample.1.gamma", "block2.downsample.1.beta",
        "fc.weight", "fc.bias",
    ]
    assert [id(p) for p in net.params()] == [id(p) for p in net.params()]
    assert all(g is p.grad for p, g in net.collect_params())
    assert Identity().init(eg).params() == []


def test_in_place_decisions(eg):
    m = Chain().init(eg)
    m.forward(eg.zeros((1, 3, 3, 2)))
    assert m.conv._pass is None
    # edges are discovered during forward: the first pass always copies
    assert not m.graph.nodes[-1].inputs[0].overwritten
    m.forward(eg.zeros((1, 3, 3, 2)))
    assert m.graph.nodes[-1].inputs[0].overwritten

    f = Fan().init(eg)
    for _ in range(2):
        f.forward(eg.zeros((1, 2, 2, 2)))
        assert f.probe.decision == COPY

    class OnParam(Module):
        def __init__(self):
            super().__init__()
            self.conv = nn.conv3d(True, 1, 1, 1)
            self.probe = Probe()

        def __forward__(self, x):
            self.conv.forward(x)
            return self.probe.forward(self.conv._params["weight"])

    p = OnParam().init(eg)
    for _ in range(2):
        p.forward(eg.zeros((1, 1, 1, 1)))
        assert p.probe.decision == COPY

    class Straight(Module):
        def __init__(self):
            super().__init__()
            self.conv = nn.conv3d(False, 1, 1, 1)
            self.probe = Probe()

        def __forward__(self, x):
            return self.probe.forward(self.conv.forward(x))

    s = Straight().init(eg)
    s.forward(eg.zeros((1, 2, 2, 1)))
    assert s.probe.decision == COPY
    s.forward(eg.zeros((1, 2, 2, 1)))
    assert s.probe.decision == IN_PLACE


def _run_net(eg, seed=3):
    net = ResNetSmall().init(eg, seed)
    rng = np.random.default_rng(seed)
    x = eg.tensor(f32(rng.random((2, 8, 8, 3))))
    net.eval().forward(x)  # warm pass so the in-place grants apply on the measured one
    net.train()
    (y,) = net.forward(x)
    g = eg.tensor(f32(rng.standard_normal(y.shape)))
    dx = net.backward(g)[0].numpy()
    out = [y.numpy(), dx] + [p.grad.numpy() for p in net.params()]
    net.gc()
    return net, x, g, out


def test_in_place_is_numerically_neutral():
    a = _run_net(cpu_engine())[3]
    b = _run_net(Engine(inplace=False))[3]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_eager_release_is_neutral_and_frees_early():
    def run(eager):
        eg = cpu_engine()
        net = ResNetSmall().init(eg, 0)
        x = eg.tensor(f32(np.random.default_rng(0).random((2, 8, 8, 3))))
        (y,) = net.forward(x)
        net.graph.release_eagerly = eager
        dx = net.backward(eg.tensor(f32(np.ones(y.shape))))[0].numpy()
        return dx, eg.pool_stats().in_use_bytes

    (d1, used_eager), (d2, used_lazy) = run(True), run(False)
    assert np.array_equal(d1, d2)
    assert used_eager < used_lazy


def test_recycle_then_rerun_identical(eg):
    net = ResNetSmall().init(eg, 0)
    rng = np.random.default_rng(1)
    xv = f32(rng.random((2, 8, 8, 3)))
    gv = f32(rng.standard_normal((2, 10)))
    res = []
    for _ in range(2):
        x = eg.tensor(xv)
        (y,) = net.forward(x)
        dx = net.backward(eg.tensor(gv))[0]
        res.append((y.numpy(), dx.numpy()))
        net.gc()
    assert np.array_equal(res[0][0], res[1][0]) and np.array_equal(res[0][1], res[1][1])


def test_router_edges_match_consumption(eg):
    net = ResNetSmall().init(eg, 0)
    x = eg.tensor(f32(np.ones((1, 8, 8, 3))))
    net.forward(x)
    gp = net.graph
    consumed = {}
    for node in gp.nodes:
        for t in node.inputs:
            consumed[id(t)] = consumed.get(id(t), 0) + 1
    for node in gp.nodes:
        for t in node.inputs:
            assert gp.consumers(t) == consumed[id(t)]
    # block input feeds main path and shortcut
    blk = [n for n in gp.nodes if n.unit is net.block1.conv1][0]
    assert gp.consumers(blk.inputs[0]) == 2
    first = gp
    net.forward(x)
    assert net.graph is not first and first.state == "recycled"


def test_resnet_block_shape_chain(eg):
    net = ResNetSmall().init(eg, 0)
    shapes = []
    orig = Block.__forward__

    def spy(self, *X):
        out = orig(self, *X)
        shapes.append(out[0].shape)
        return out

    Block.__forward__ = spy
    try:
        (y,) = net.forward(eg.zeros((3, 32, 32, 3)))
    finally:
        Block.__forward__ = orig
    assert shapes == [(3, 16, 16, 128), (3, 8, 8, 256)]
    assert y.shape == (3, 10)


# -- fan-out summation over random DAGs, against a whole-graph finite-difference oracle ---------

OPS = ("add", "sigmoid", "leaky", "mul_const")


class Program(Module):
    def __init__(self, prog):
        super().__init__()
        self.prog = prog

    def __forward__(self, x):
        vals = [x]
        for op, i, j in self.prog:
            a, b = vals[i % len(vals)], vals[j % len(vals)]
            if op == "add":
                vals.append(F.add(a, b)[0])
            elif op == "sigmoid":
                vals.append(F.sigmoid(a, inplace=False)[0])
            elif op == "leaky":
                vals.append(F.leaky_relu(a, 0.1, inplace=False)[0])
        return vals[-1]


def _oracle(prog, x):
    vals = [x]
    for op, i, j in prog:
        a, b = vals[i % len(vals)], vals[j % len(vals)]
        if op == "add":
            vals.append(a + b)
        elif op == "sigmoid":
            vals.append(oracles.sigmoid(a))
        elif op == "leaky":
            vals.append(oracles.leaky_relu(a, 0.1))
    return vals[-1]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["add", "sigmoid", "leaky"]), st.integers(0, 20),
                          st.integers(0, 20)), min_size=1, max_size=8),
       st.integers(0, 1000))
def test_property_fanout_gradient_matches_fd(prog, seed):
    eg = cpu_engine()
    rng = np.random.default_rng(seed)
    xv = f32(rng.uniform(0.2, 1.0, 5) * rng.choice([-1, 1], 5))
    r = f32(rng.standard_normal(5))
    m = Program(prog).init(eg)
    x = eg.tensor(xv)
    (y,) = m.forward(x)
    if y is x:
        return
    dx = m.backward(eg.tensor(r))[0]
    num = oracles.numeric_grad(lambda a: float((_oracle(prog, a) * r).sum()), [xv])[0]
    if dx is None:
        assert np.allclose(num, 0)
        return
    assert oracles.max_rel_err(dx.numpy(), num) < 1e-3
