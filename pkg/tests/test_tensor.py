from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from trojancc.tensor import Tensor, TensorError, decode_data, dumps, encode_data, loads, read_tensor, write_tensor

KIND_DTYPES = {"uint8": np.uint8, "int32": np.int32, "float32": np.float32}

shapes = hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6)


@st.composite
def tensors(draw):
    kind = draw(st.sampled_from(sorted(KIND_DTYPES)))
    arr = draw(hnp.arrays(KIND_DTYPES[kind], shapes))
    return Tensor.from_array(arr)


def test_shape_and_count_checked():
    with pytest.raises(TensorError):
        Tensor((2, 2), "int32", np.arange(3))
    with pytest.raises(TensorError):
        Tensor((0,), "int32", np.arange(0))
    with pytest.raises(TensorError):
        Tensor((2,), "float64", np.zeros(2))
    with pytest.raises(TensorError):
        Tensor.of([256], "uint8")


def test_data_is_read_only():
    t = Tensor.of([1, 2, 3], "int32")
    with pytest.raises(ValueError):
        t.data[0] = 5


def test_equality_is_bitwise():
    assert Tensor.of([0.0], "float32") != Tensor.of([-0.0], "float32")
    nan = np.array([np.nan], dtype=np.float32)
    assert Tensor.from_array(nan) == Tensor.from_array(nan.copy())
    assert Tensor.of([1], "int32") != Tensor.of([1], "uint8")


def test_text_format_example():
    t = loads("# comment\n2 2 3 int32\n1 2 3\n4 5 6\n")
    assert t.shape == (2, 3)
    assert t.array.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_bad_header_rejected():
    with pytest.raises(TensorError):
        loads("2 2 int32\n1 2\n")
    with pytest.raises(TensorError):
        loads("")


def test_large_uint8_uses_base64():
    t = Tensor.from_array(np.arange(200, dtype=np.uint8))
    text = dumps(t)
    assert text.splitlines()[1].startswith("base64 ")
    assert loads(text) == t


@given(tensors())
def test_text_round_trip(t):
    assert loads(dumps(t)) == t


@given(tensors())
def test_inline_encoding_round_trip(t):
    assert decode_data(encode_data(t), t.shape, t.elem_kind) == t


def test_file_round_trip(tmp_path):
    t = Tensor.of([[1.5, -2.25]], "float32")
    write_tensor(tmp_path / "t.tns", t)
    assert read_tensor(tmp_path / "t.tns") == t


def test_nan_payload_survives_text():
    bits = np.array([0x7FC00000, 0xFFC00000, 0x7F800001, 0xFFFFFFFF], dtype=np.uint32)
    t = Tensor.from_array(bits.view(np.float32))
    assert dumps(t).split()[-4:] == ["nan", "nan:0xffc00000", "nan:0x7f800001", "nan:0xffffffff"]
    assert loads(dumps(t)) == t
    with pytest.raises(TensorError):
        loads("1 1 float32\nnan:0x3f800000\n")
