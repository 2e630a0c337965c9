import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from curdkv.cache import generate_synthetic
from curdkv.tensorfile import (
    MAGIC,
    TensorFileError,
    decode,
    encode,
    read_cache,
    read_cache_files,
    read_tensor,
    write_cache,
    write_tensor,
)


def test_header_layout():
    buf = encode(np.arange(6.0).reshape(2, 3), "f4")
    assert buf[:4] == MAGIC
    assert buf[4] == 1 and buf[5] == 2
    assert struct.unpack("<2Q", buf[6:22]) == (2, 3)
    assert np.frombuffer(buf[22:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_scalar_vector():
    arr, code = decode(encode([1.5]))
    assert code == 2 and arr.tolist() == [1.5]


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple), elements=st.floats(-1e300, 1e300)))
def test_f8_round_trip_bit_exact(a):
    out, code = decode(encode(a, "f8"))
    assert code == 2
    assert out.tobytes() == a.tobytes()


@settings(max_examples=80, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple), elements=st.floats(-65504.0, 65504.0, width=32)))
def test_f4_round_trip_bit_exact(a):
    out, code = decode(encode(a, "f4"))
    assert code == 1
    assert out.astype(np.float32).tobytes() == a.tobytes()
    assert decode(encode(out, "f4"))[0].tobytes() == out.tobytes()


def test_negative_zero_preserved():
    out, _ = decode(encode(np.array([-0.0, 0.0])))
    assert np.signbit(out).tolist() == [True, False]


@pytest.mark.parametrize(
    "buf",
    [
        b"",
        b"CKV2" + bytes(10),
        MAGIC + bytes([3, 1]) + struct.pack("<Q", 1) + bytes(8),
        MAGIC + bytes([2, 2]) + struct.pack("<Q", 2),
        MAGIC + bytes([2, 1]) + struct.pack("<Q", 2) + bytes(8),
        MAGIC + bytes([2, 1]) + struct.pack("<Q", 1) + bytes(16),
        MAGIC + bytes([2, 1]) + struct.pack("<Q", 0),
        MAGIC + bytes([2, 0]),
    ],
)
def test_malformed_rejected(buf):
    with pytest.raises(TensorFileError):
        decode(buf)


@pytest.mark.parametrize("arr", [np.zeros((0,)), np.zeros((2, 0)), np.array([np.nan]), np.array([np.inf])])
def test_bad_write_rejected(arr):
    with pytest.raises(TensorFileError):
        encode(arr)


def test_unknown_dtype():
    with pytest.raises(TensorFileError):
        encode([1.0], "f2")


def test_file_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 4, 5))
    write_tensor(tmp_path / "a.ckv", a)
    out, _ = read_tensor(tmp_path / "a.ckv")
    assert out.tobytes() == a.tobytes()


def test_cache_dir_round_trip(tmp_path):
    c = generate_synthetic("planted_heavy", 2, 20, 4, seed=3)
    write_cache(tmp_path, c, manifest={"kind": "planted_heavy", "seed": 3, "planted": c.info["planted"]})
    back, code, manifest = read_cache(tmp_path)
    assert code == 2 and back.equals(c)
    assert manifest["groups"] == 2 and back.info["planted"] == c.info["planted"]


def test_cache_files_shape_checks(tmp_path):
    write_tensor(tmp_path / "k.ckv", np.ones((1, 2, 3)))
    write_tensor(tmp_path / "v.ckv", np.ones((1, 3, 3)))
    write_tensor(tmp_path / "f.ckv", np.ones((2, 3)))
    write_tensor(tmp_path / "v4.ckv", np.ones((1, 2, 3)), "f4")
    with pytest.raises(TensorFileError):
        read_cache_files(tmp_path / "k.ckv", tmp_path / "v.ckv")
    with pytest.raises(TensorFileError):
        read_cache_files(tmp_path / "f.ckv", tmp_path / "f.ckv")
    with pytest.raises(TensorFileError):
        read_cache_files(tmp_path / "k.ckv", tmp_path / "v4.ckv")
