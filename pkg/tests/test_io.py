import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from sansaw.io import (
    FormatError,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
)


def test_layout_is_little_endian():
    blob = tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
    assert blob[:4] == b"SAWT"
    assert struct.unpack("<III", blob[4:16]) == (1, 2, 1)
    assert struct.unpack("<I", blob[16:20]) == (2,)
    assert struct.unpack("<2f", blob[20:]) == (1.0, 2.0)


@given(arrays(np.float32, array_shapes(min_dims=1, max_dims=4, max_side=5),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_bitwise(t):
    assert tensor_from_bytes(tensor_to_bytes(t)).tobytes() == t.tobytes()


def test_file_round_trip(tmp_path):
    t = np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2)
    save_tensor(tmp_path / "t.sawt", t)
    assert np.array_equal(load_tensor(tmp_path / "t.sawt"), t)


@pytest.mark.parametrize("blob", [
    b"NOPE" + b"\0" * 12,
    b"SAWT" + struct.pack("<II", 2, 1) + struct.pack("<I", 1) + b"\0" * 4,
    b"SAWT" + struct.pack("<II", 1, 5),
    b"SAWT" + struct.pack("<II", 1, 1) + struct.pack("<I", 4) + b"\0" * 8,
])
def test_malformed_tensors(blob):
    with pytest.raises(FormatError):
        tensor_from_bytes(blob)


def test_rank_limits():
    with pytest.raises(FormatError):
        tensor_to_bytes(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(FormatError):
        tensor_to_bytes(np.float32(3.0))


def test_checkpoint_round_trip(tmp_path):
    tensors = {"conv1.w": np.ones((2, 3, 3, 3), np.float32), "gamma": np.array([1.5, -2], np.float32)}
    save_checkpoint(tmp_path / "c.sawm", tensors)
    back = load_checkpoint(tmp_path / "c.sawm")
    assert list(back) == list(tensors)
    assert all(back[k].tobytes() == tensors[k].tobytes() for k in tensors)


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.sawm"
    p.write_bytes(b"SAWT")
    with pytest.raises(FormatError):
        load_checkpoint(p)
    save_checkpoint(p, {"a": np.ones(3, np.float32)})
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(FormatError):
        load_checkpoint(p)
