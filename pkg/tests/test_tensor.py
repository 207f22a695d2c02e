import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetseg.exceptions import AllocationError, BoundsError, SpecError
from hetseg.tensor import (Layout, PhysicalBuffer, Shape, alias, dump_raw, from_numpy, load_raw,
                           make_tensor, repack)

LAYOUTS = list(Layout)


def test_shape_rejects_zero_dims():
    with pytest.raises(SpecError):
        Shape(1, 0, 2, 2)


def test_zero_fill_reads_zero():
    t = make_tensor((1, 2, 2, 1), fill=0.0)
    assert all(t.read(0, h, w, 0) == 0.0 for h in range(2) for w in range(2))


def test_packed4_padding_lanes_are_zero():
    t = make_tensor((1, 1, 1, 6), Layout.PACKED4, fill="random", seed=1)
    assert t.buffer.capacity == 8  # two slices of four lanes
    assert t.raw[6] == 0.0 and t.raw[7] == 0.0
    assert np.all(t.raw[:6] != 0.0)


def test_random_fill_is_seeded():
    a = make_tensor((1, 3, 3, 5), fill="random", seed=7)
    b = make_tensor((1, 3, 3, 5), fill="random", seed=7)
    c = make_tensor((1, 3, 3, 5), fill="random", seed=8)
    assert np.array_equal(a.numpy(), b.numpy())
    assert not np.array_equal(a.numpy(), c.numpy())


def test_oversized_tensor_is_an_allocation_error():
    with pytest.raises(AllocationError):
        make_tensor((1 << 16, 1 << 8, 1 << 8, 1))


def test_repack_interleaved_to_planar_storage_order():
    t = make_tensor((1, 1, 2, 3), fill=np.arange(1, 7))
    p = repack(t, Layout.PLANAR)
    assert p.raw.tolist() == [1, 4, 2, 5, 3, 6]


@pytest.mark.parametrize("layout", LAYOUTS)
def test_repack_to_same_layout_copies(layout):
    t = make_tensor((1, 2, 3, 5), layout, fill="random", seed=0)
    r = repack(t, layout)
    assert r.buffer is not t.buffer
    assert np.array_equal(r.numpy(), t.numpy())


def test_packed_round_trip_is_bit_equal():
    t = make_tensor((1, 3, 3, 5), fill="random", seed=3)
    back = repack(repack(t, Layout.PACKED4), Layout.INTERLEAVED)
    assert back.raw.tobytes() == t.raw.tobytes()


@pytest.mark.parametrize("layout", LAYOUTS)
def test_write_then_read(layout):
    t = make_tensor((2, 2, 3, 5), layout)
    t.write(1, 1, 2, 4, 3.25)
    assert t.read(1, 1, 2, 4) == 3.25
    assert repack(t, Layout.INTERLEAVED).read(1, 1, 2, 4) == 3.25


@pytest.mark.parametrize("layout", LAYOUTS)
def test_out_of_range_index(layout):
    t = make_tensor((1, 2, 2, 3), layout)
    with pytest.raises(BoundsError):
        t.read(0, 2, 0, 0)
    with pytest.raises(BoundsError):
        t.write(0, 0, 0, 3, 1.0)
    with pytest.raises(BoundsError):
        t.read(0, -1, 0, 0)


@pytest.mark.parametrize("layout", LAYOUTS)
def test_full_scan_matches_fill_sequence(layout):
    seq = np.arange(16, dtype=np.float32)
    t = make_tensor((2, 2, 2, 2), layout, fill=seq)
    scan = [t.read(n, h, w, c) for n in range(2) for h in range(2) for w in range(2) for c in range(2)]
    assert scan == seq.tolist()


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 2), h=st.integers(1, 8), w=st.integers(1, 8), c=st.integers(1, 9),
       src=st.sampled_from(LAYOUTS), dst=st.sampled_from(LAYOUTS), seed=st.integers(0, 2**16))
def test_layout_transparency(n, h, w, c, src, dst, seed):
    t = make_tensor((n, h, w, c), src, fill="random", seed=seed)
    r = repack(t, dst)
    assert r.numpy().tobytes() == t.numpy().tobytes()
    if dst is Layout.PACKED4 and c % 4:
        last_slice = r.raw.reshape(n, -1, h, w, 4)[:, -1]
        assert not last_slice[..., c % 4:].any()


def test_buffer_byte_len():
    assert PhysicalBuffer(16).byte_len == 64


def test_aliases_observe_each_others_writes():
    a = make_tensor((1, 2, 2, 4))
    b = alias(a, shape=(1, 1, 4, 4))
    a.write(0, 1, 0, 2, 9.0)
    assert b.read(0, 0, 2, 2) == 9.0
    assert b.buffer is a.buffer


def test_alias_must_fit_its_buffer():
    a = make_tensor((1, 2, 2, 4))
    with pytest.raises(AllocationError):
        alias(a, offset=1)


def test_raw_dump_round_trip():
    t = make_tensor((1, 2, 3, 5), Layout.PACKED4, fill="random", seed=2)
    fh = io.BytesIO()
    dump_raw(t, fh)
    data = fh.getvalue()
    assert data[:4] == b"HSEG" and len(data) == 24 + 4 * 30
    back = load_raw(io.BytesIO(data))
    assert np.array_equal(back.numpy(), t.numpy())


def test_raw_dump_rejects_bad_magic():
    with pytest.raises(SpecError):
        load_raw(io.BytesIO(b"XXXX" + bytes(20)))


def test_from_numpy_requires_4d():
    with pytest.raises(SpecError):
        from_numpy(np.zeros((2, 2)))
