import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from advlab.io import FormatError, MAGIC, load_container, load_tensor, save_container, save_tensor


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, width=64)))
def test_tensor_roundtrip_bit_exact(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("t") / "a.bin"
    save_tensor(p, a, note="x")
    assert np.array_equal(load_tensor(p), a)


def test_layout(tmp_path):
    p = tmp_path / "c.bin"
    save_container(p, "tensor", {}, [("data", np.array([1.5]))])
    blob = p.read_bytes()
    assert blob[:8] == MAGIC
    assert blob[-8:] == np.array([1.5], dtype="<f8").tobytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "c.bin"
    p.write_bytes(b"NOTMAGIC" + b"\0" * 20)
    with pytest.raises(FormatError, match="magic"):
        load_container(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "c.bin"
    save_tensor(p, np.arange(10.0))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError, match="truncated"):
        load_tensor(p)


def test_wrong_kind(tmp_path):
    p = tmp_path / "c.bin"
    save_tensor(p, np.zeros(2))
    with pytest.raises(FormatError, match="expected"):
        load_container(p, "network")
