import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sreconv.errors import PgmError, ShapeError
from sreconv.pgm import pgm_bytes, read_pgm, to_uint8, write_pgm


def test_pgm_layout():
    img = np.array([[0, 255, 7]], dtype=np.uint8)
    assert pgm_bytes(img) == b"P5\n3 1\n255\n\x00\xff\x07"


@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_roundtrip(img):
    np.testing.assert_array_equal(read_pgm(pgm_bytes(img)), img)


def test_write_pgm(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path = write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pgm(path.read_bytes()), img)


def test_pgm_errors():
    with pytest.raises(PgmError):
        read_pgm(b"P2\n1 1\n255\n0")
    with pytest.raises(PgmError):
        read_pgm(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(PgmError):
        read_pgm(b"P5\n2 2\n255\n" + bytes(3))
    with pytest.raises(ShapeError):
        pgm_bytes(np.zeros((2, 2), dtype=np.float32))


def test_to_uint8():
    np.testing.assert_array_equal(to_uint8([[-1.0, 0.0, 1.0]]), [[0, 128, 255]])
    np.testing.assert_array_equal(to_uint8(np.full((2, 2), 3.0)), np.zeros((2, 2)))
    np.testing.assert_array_equal(to_uint8([[0, 6]], 0, 3), [[0, 255]])
