import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sreconv.errors import InvalidKernelSizeError, ShapeError
from sreconv.kernel import (
    BandSpec,
    BandWeights,
    band_count,
    build_index_matrix,
    distance_matrix,
    expand_kernel,
    init_band_weights,
    init_scale,
    kernel_param_count,
    standard_param_count,
)
from sreconv.tensor import symmetry_group

R2 = math.sqrt(2)


def reference_band(offset, k, d):
    """Hand-rolled binning rule: equal-width annuli over [0, corner distance]."""
    r = k // 2
    b = r + 2
    dist = math.sqrt(sum(o * o for o in offset))
    if dist > r:
        return -1
    d_max = r * math.sqrt(d)
    if d_max == 0:
        return 0
    return min(b - 1, math.floor(dist * b / (d_max + 1e-9)))


@pytest.mark.parametrize("k,b", [(1, 2), (3, 3), (5, 4), (7, 5), (9, 6), (15, 9)])
def test_band_count(k, b):
    assert band_count(k) == b


@pytest.mark.parametrize("k", [0, -3, 4, 10, 2.0, "3"])
def test_band_count_rejects(k):
    with pytest.raises(InvalidKernelSizeError):
        band_count(k)


def test_distance_matrix_examples():
    np.testing.assert_allclose(distance_matrix(BandSpec(3)),
                               [[R2, 1, R2], [1, 0, 1], [R2, 1, R2]])
    np.testing.assert_array_equal(distance_matrix(BandSpec(1)), [[0.0]])
    d3 = distance_matrix(BandSpec(3, 3))
    np.testing.assert_array_equal(d3[1], distance_matrix(BandSpec(3)))
    assert d3[0, 0, 0] == d3[2, 2, 2] == math.sqrt(3)


@pytest.mark.parametrize("k,d", [(3, 2), (7, 2), (5, 3)])
def test_distance_matrix_invariants(k, d):
    dist = distance_matrix(BandSpec(k, d))
    assert dist[(k // 2,) * d] == 0
    assert dist.max() == pytest.approx((k // 2) * math.sqrt(d))
    for g in symmetry_group(d):
        np.testing.assert_array_equal(g.apply(dist), dist)


def test_index_matrix_k3():
    idx = build_index_matrix(BandSpec(3))
    m = idx.m
    assert m.shape == (3, 9)
    np.testing.assert_array_equal(m[:, 4], [1, 0, 0])
    for edge in (1, 3, 5, 7):
        np.testing.assert_array_equal(m[:, edge], [0, 0, 1])
    for corner in (0, 2, 6, 8):
        np.testing.assert_array_equal(m[:, corner], [0, 0, 0])
    assert np.count_nonzero(m.sum(axis=0)) == 5
    assert idx.empty_bands == [1]


def test_index_matrix_k1():
    np.testing.assert_array_equal(build_index_matrix(BandSpec(1)).m, [[1], [0]])


@pytest.mark.parametrize("k,d", [(k, 2) for k in (1, 3, 5, 7, 9, 11, 13)] + [(3, 3), (5, 3), (7, 3)])
def test_index_matrix_matches_reference(k, d):
    spec = BandSpec(k, d)
    idx = build_index_matrix(spec)
    r = k // 2
    offs = np.stack(np.meshgrid(*[np.arange(-r, r + 1)] * d, indexing="ij"), -1).reshape(-1, d)
    expected = [reference_band(tuple(o), k, d) for o in offs]
    np.testing.assert_array_equal(idx.band_of, expected)
    cols = idx.m.sum(axis=0)
    assert set(np.unique(cols)) <= {0.0, 1.0}
    np.testing.assert_array_equal(cols == 0, distance_matrix(spec).ravel() > r)


@pytest.mark.parametrize("k,d,sizes", [
    (3, 2, [1, 0, 4]),
    (9, 2, [1, 8, 16, 20, 4, 0]),
    (3, 3, [1, 6, 0]),
    (5, 3, [1, 26, 6, 0]),
])
def test_band_sizes(k, d, sizes):
    assert build_index_matrix(BandSpec(k, d)).band_sizes.tolist() == sizes


def test_expand_kernel_k3_example():
    idx = build_index_matrix(BandSpec(3))
    K = expand_kernel(idx, np.array([[[1.0, 2.0, 3.0]]]))
    np.testing.assert_array_equal(K[0, 0], [[0, 3, 0], [3, 1, 3], [0, 3, 0]])
    np.testing.assert_array_equal(expand_kernel(idx, np.zeros((2, 3, 3))), np.zeros((2, 3, 3, 3)))


def test_expand_kernel_band_mismatch():
    with pytest.raises(ShapeError):
        expand_kernel(build_index_matrix(BandSpec(5)), np.zeros((1, 1, 3)))


@given(st.sampled_from([3, 5, 7, 9]), st.integers(0, 2**32 - 1))
def test_expand_kernel_linear_and_symmetric(k, seed):
    idx = build_index_matrix(BandSpec(k))
    rng = np.random.default_rng(seed)
    t1, t2 = rng.standard_normal((2, 2, 3, idx.spec.b))
    np.testing.assert_allclose(expand_kernel(idx, t1 + t2),
                               expand_kernel(idx, t1) + expand_kernel(idx, t2), atol=1e-12)
    K = expand_kernel(idx, t1.astype(np.float32))
    for g in symmetry_group(2):
        np.testing.assert_array_equal(g.apply(K), K)
    # centrally symmetric, so correlation and convolution coincide
    np.testing.assert_array_equal(K[..., ::-1, ::-1], K)


def test_expand_accepts_band_weights():
    spec = BandSpec(5)
    w = init_band_weights(spec, 2, 3, seed=0)
    assert isinstance(w, BandWeights)
    np.testing.assert_array_equal(expand_kernel(build_index_matrix(spec), w),
                                  expand_kernel(build_index_matrix(spec), w.theta))


def test_param_counts():
    assert kernel_param_count(64, 64, BandSpec(9)) == 24_640
    assert standard_param_count(64, 64, BandSpec(9)) == 331_840
    assert kernel_param_count(1, 1, BandSpec(3)) == 4
    assert kernel_param_count(1, 1, BandSpec(5, 3), with_bias=False) == 4
    assert standard_param_count(1, 1, BandSpec(5, 3), with_bias=False) == 125


@pytest.mark.parametrize("d", [2, 3])
def test_param_ratio_below_one(d):
    for k in (3, 5, 7, 9):
        spec = BandSpec(k, d)
        ratio = kernel_param_count(1, 1, spec, False) / standard_param_count(1, 1, spec, False)
        assert ratio == spec.b / k**d < 1


def test_init_deterministic_and_bias_zero():
    spec = BandSpec(7)
    a = init_band_weights(spec, 4, 5, seed=3)
    b = init_band_weights(spec, 4, 5, seed=3)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.bias, np.zeros(5))
    assert a.theta.dtype == np.float32
    assert init_band_weights(spec, 1, 1, dtype="f64").theta.dtype == np.float64


def test_init_variance():
    spec = BandSpec(5)
    idx = build_index_matrix(spec)
    c_in = 4
    w = init_band_weights(spec, c_in, 2500, seed=0, dtype="f64")
    K = expand_kernel(idx, w).reshape(-1, spec.cells)[:, idx.band_of >= 0]
    assert K.size >= 10_000
    s = init_scale(c_in, idx.active)
    assert abs(K.var() / (s**2 / 3) - 1) < 0.2
