import io
import struct

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from jointvit.tensor_file import TensorFormatError, load_tensor, read_header, read_tensor, save_tensor, write_tensor


def test_header_layout_rank2():
    buf = io.BytesIO()
    write_tensor(buf, np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = buf.getvalue()
    assert raw[:4] == b"IVT1"
    assert struct.unpack("<3I", raw[4:16]) == (2, 2, 3)
    assert len(raw) == 16 + 6 * 4
    npt.assert_array_equal(np.frombuffer(raw[16:], "<f4"), np.arange(6))


def test_header_size_scales_with_rank():
    for shape in [(), (5,), (2, 3, 4), (1, 2, 3, 4, 5)]:
        buf = io.BytesIO()
        write_tensor(buf, np.zeros(shape))
        assert len(buf.getvalue()) == 8 + 4 * len(shape) + 4 * int(np.prod(shape))


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=5, max_side=4),
                  elements=st.floats(width=32, allow_nan=False)))
def test_round_trip_f32(arr):
    buf = io.BytesIO()
    write_tensor(buf, arr)
    buf.seek(0)
    back = read_tensor(buf)
    assert back.dtype == np.float32 and back.shape == arr.shape
    npt.assert_array_equal(back, arr)


def test_round_trip_f64_bit_exact(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4))
    save_tensor(tmp_path / "x", arr, np.float64)
    back = load_tensor(tmp_path / "x")
    assert back.dtype == np.float64
    assert back.tobytes() == arr.tobytes()
    assert read_header(tmp_path / "x") == (np.dtype("<f8"), (3, 4))


def test_rejects_bad_input(tmp_path):
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(io.BytesIO(b"XXXX" + bytes(8)))
    good = io.BytesIO()
    write_tensor(good, np.ones((2, 2)))
    raw = good.getvalue()
    for cut in (3, 7, 13, len(raw) - 1):
        with pytest.raises(TensorFormatError, match="truncated"):
            read_tensor(io.BytesIO(raw[:cut]))
    (tmp_path / "t").write_bytes(raw + b"\0")
    with pytest.raises(TensorFormatError, match="trailing"):
        load_tensor(tmp_path / "t")
    with pytest.raises(TensorFormatError):
        write_tensor(io.BytesIO(), np.ones(2), np.int32)
