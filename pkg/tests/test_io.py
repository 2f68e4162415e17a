import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from gausshead.errors import FormatError
from gausshead.io import (CHECKPOINT_MAGIC, decode_bundle, decode_tensor, encode_bundle, encode_tensor, read_tensor,
                          write_tensor)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=False, width=64)))
def test_f64_round_trip_is_bitwise(arr):
    buf = encode_tensor(arr, "f64")
    back, end, dtype = decode_tensor(buf)
    assert end == len(buf) and dtype == "f64"
    assert back.shape == arr.shape and back.tobytes() == np.ascontiguousarray(arr).tobytes()
    assert encode_tensor(back, "f64") == buf


def test_header_layout():
    buf = encode_tensor(np.zeros((2, 3)), "f32")
    assert buf[:4] == b"ETGT"
    assert struct.unpack_from("<HHI", buf, 4) == (1, 0, 2)
    assert struct.unpack_from("<2Q", buf, 12) == (2, 3)
    assert len(buf) == 12 + 16 + 6 * 4


def test_file_round_trip(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_tensor(tmp_path / "a.etgt", a)
    assert np.array_equal(read_tensor(tmp_path / "a.etgt", as_float64=False), a)
    assert list(tmp_path.iterdir()) == [tmp_path / "a.etgt"]  # no temp files left


@pytest.mark.parametrize("cut", [3, 11, 20, 40])
def test_truncation_reports_offset(cut):
    buf = encode_tensor(np.ones((2, 3)), "f64")[:cut]
    with pytest.raises(FormatError) as exc:
        decode_tensor(buf)
    assert "byte offset" in str(exc.value) and exc.value.offset is not None


def test_bad_magic_and_dtype():
    buf = bytearray(encode_tensor(np.ones(2)))
    with pytest.raises(FormatError):
        decode_tensor(b"XXXX" + bytes(buf[4:]))
    buf[6] = 9
    with pytest.raises(FormatError, match="dtype"):
        decode_tensor(bytes(buf))


def test_bundle_round_trip_and_trailing_bytes():
    tensors = {"b": (np.arange(3.0), "f64"), "a": (np.ones((2, 2)), "f32")}
    buf = encode_bundle(CHECKPOINT_MAGIC, {"x": 1, "y": [1, 2]}, tensors)
    meta, back = decode_bundle(buf, CHECKPOINT_MAGIC)
    assert meta == {"x": 1, "y": [1, 2]}
    assert encode_bundle(CHECKPOINT_MAGIC, meta, back) == buf
    with pytest.raises(FormatError, match="trailing"):
        decode_bundle(buf + b"\0", CHECKPOINT_MAGIC)
    for cut in range(0, len(buf) - 1, 7):
        with pytest.raises(FormatError):
            decode_bundle(buf[:cut], CHECKPOINT_MAGIC)
