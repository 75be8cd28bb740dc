import threading

import numpy as np
import pytest

from tensorforge.backend import ConvDescriptor
from tensorforge.errors import ArgumentError, BoundsError, InvalidHandleError, ShapeError
from tensorforge.tensor import layout_map, padded_extent


def test_layout_padding_lanes_zero(eg):
    t = eg.tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    phys = t.physical()
    assert phys.shape == (2, 4)
    assert phys.ravel().tolist() == [0, 1, 2, 0, 3, 4, 5, 0]


def test_layout_map():
    assert layout_map((2, 3), (1, 2)) == 6
    assert layout_map((2, 3), (0, 0)) == 0
    assert layout_map((2, 8), (1, 3)) == 11
    with pytest.raises(BoundsError):
        layout_map((2, 3), (2, 0))


def test_int8_pixels_padded(eg):
    x = eg.tensor(np.full((2, 32, 32, 3), 9, np.uint8), dtype="int8")
    assert x.nbytes == 2 * 32 * 32 * 4
    assert not x.physical()[..., 3].any()


def test_scalar_roundtrip_and_count_mismatch(eg):
    assert eg.tensor([7.0]).item() == 7.0
    with pytest.raises(ShapeError):
        eg.tensor([1.0, 2.0], shape=(3,))


def test_pix2float(eg):
    x = eg.tensor(np.array([0, 255, 51], np.uint8), dtype="int8")
    assert eg.to_float(x).numpy().tolist() == pytest.approx([0.0, 1.0, 0.2])
    with pytest.raises(ArgumentError):
        eg.to_float(eg.zeros((3,)))
    empty = eg.tensor(np.zeros(0, np.uint8), dtype="int8")
    assert eg.to_float(empty).size == 0


def test_delete_twice_and_read_after(eg):
    t = eg.zeros((4,))
    before = eg.core.pool.free_list_length()
    assert t.delete() == 256
    assert eg.core.pool.free_list_length() == before + 1
    with pytest.raises(InvalidHandleError):
        t.delete()
    with pytest.raises(InvalidHandleError):
        t.numpy()


def test_async_returns_pending_and_wait_completes(eg):
    eg.set_flags(sync=False)
    gate = threading.Event()
    eg.backend.enqueue(gate.wait, eg.current_stream)
    y = eg.leaky_relu(eg.zeros((8,)))
    assert not y.event.done
    gate.set()
    assert y.wait().event.done
    y.wait()


def test_delete_of_pending_tensor_waits(eg):
    eg.set_flags(sync=False)
    gate = threading.Event()
    eg.backend.enqueue(gate.wait, eg.current_stream)
    y = eg.scale(eg.zeros((8,)), 2.0)
    ev = y.event
    threading.Timer(0.05, gate.set).start()
    y.delete()
    assert ev.done


def test_failed_op_error_surfaces_at_wait(eg):
    eg.set_flags(sync=False, check=False)
    d = ConvDescriptor.square(3, 2, 3, 1, 1)
    y = eg.conv2d(eg.zeros((1, 4, 4, 4)), eg.zeros(d.filter_shape), d)
    with pytest.raises(ShapeError):
        y.wait()


def test_check_flag_reports_before_launch(eg):
    d = ConvDescriptor.square(3, 2, 3, 1, 1)
    with pytest.raises(ShapeError, match="conv2d"):
        eg.conv2d(eg.zeros((1, 4, 4, 4)), eg.zeros(d.filter_shape), d)


def test_three_stream_join(eg):
    """Three producers on three streams, then a consumer after awaiting all of them."""
    eg.set_flags(sync=False)
    rng = np.random.default_rng(0)
    streams = [eg.new_stream() for _ in range(3)]
    a = eg.tensor(rng.standard_normal((4, 4)).astype(np.float32))
    outs = []
    for s in streams:
        with eg.using_stream(s):
            outs.append(eg.scale(a, 2.0))
    for o in outs:
        o.wait()
    total = eg.add(eg.add(outs[0], outs[1]), outs[2])
    assert np.array_equal(total.numpy(), (a.numpy() * 2) * 3)


def test_reshape_view_and_repack(eg):
    x = eg.tensor(np.arange(2 * 256, dtype=np.float32).reshape(2, 1, 1, 256))
    f = eg.reshape(x, (2, 256))
    assert f.buffer == x.buffer
    assert np.array_equal(f.numpy(), x.numpy().reshape(2, 256))
    same = eg.reshape(x, x.shape)
    assert np.array_equal(same.numpy(), x.numpy())
    t = eg.tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    r = t.reshape(3, 2)
    assert r.buffer != t.buffer
    assert r.numpy().ravel().tolist() == list(range(6))
    assert r.physical().ravel().tolist() == [0, 1, 0, 0, 2, 3, 0, 0, 4, 5, 0, 0]
    with pytest.raises(ShapeError):
        t.reshape(4, 2)


def test_view_keeps_storage_until_last_reference(eg):
    x = eg.zeros((2, 4))
    v = eg.reshape(x, (1, 2, 4))
    assert x.delete() == 0
    assert v.numpy().shape == (1, 2, 4)
    assert v.delete() > 0


def test_padded_extent():
    assert [padded_extent(n) for n in (1, 3, 4, 5, 8)] == [4, 4, 4, 8, 8]
