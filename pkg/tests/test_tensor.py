import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from src.core.tensor import (
    conv2d,
    conv2d_kernel_grad,
    conv2d_transpose,
    conv_output_size,
    dtype_for,
    hard_sigmoid,
    hard_sigmoid_mask,
    inner,
    kaiming_uniform,
    matmul,
    matvec,
    maxpool,
    pool_gather,
    unpool,
)
from src.helpers.model import ConfigurationError, DimensionError


def naive_conv(x, w, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    batch, _, height, width = x.shape
    out_channels, _, k, _ = w.shape
    out_h = conv_output_size(height, k, stride, padding)
    out_w = conv_output_size(width, k, stride, padding)
    out = np.zeros((batch, out_channels, out_h, out_w))
    for n in range(batch):
        for o in range(out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    window = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = np.sum(window * w[o])
    return out


@st.composite
def conv_cases(draw):
    k = draw(st.sampled_from([1, 2, 3]))
    padding = draw(st.integers(0, k // 2))
    stride = draw(st.integers(1, 2))
    height = draw(st.integers(k, 7))
    width = draw(st.integers(k, 7))
    channels = draw(st.integers(1, 3))
    out_channels = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**16))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, channels, height, width))
    w = rng.normal(size=(out_channels, channels, k, k))
    return x, w, stride, padding, rng


@settings(max_examples=100, deadline=None)
@given(conv_cases())
def test_conv2d_matches_naive_loop(case):
    x, w, stride, padding, _ = case
    assert_allclose(conv2d(x, w, stride, padding), naive_conv(x, w, stride, padding), rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(conv_cases())
def test_conv2d_transpose_is_adjoint(case):
    x, w, stride, padding, rng = case
    y = conv2d(x, w, stride, padding)
    g = rng.normal(size=y.shape)
    back = conv2d_transpose(g, w, stride, padding, output_size=x.shape[2:])
    assert back.shape == x.shape
    assert inner(y, g) == pytest.approx(inner(x, back), rel=1e-10, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(conv_cases())
def test_kernel_grad_is_adjoint_in_weights(case):
    x, w, stride, padding, rng = case
    y = conv2d(x, w, stride, padding)
    g = rng.normal(size=y.shape)
    grad = conv2d_kernel_grad(x, g, w.shape[2], stride, padding)
    assert grad.shape == w.shape
    assert inner(y, g) == pytest.approx(inner(w, grad), rel=1e-10, abs=1e-10)


def test_conv2d_transpose_rejects_inconsistent_output_size():
    w = np.ones((1, 1, 3, 3))
    g = np.ones((1, 1, 2, 2))
    with pytest.raises(DimensionError):
        conv2d_transpose(g, w, stride=2, padding=1, output_size=(7, 7))


def test_conv2d_rejects_mismatches():
    x = np.ones((1, 2, 4, 4))
    with pytest.raises(DimensionError):
        conv2d(x, np.ones((1, 3, 3, 3)))
    with pytest.raises(DimensionError):
        conv2d(x, np.ones((1, 2, 3, 3), dtype=np.float32))
    with pytest.raises(DimensionError):
        conv2d(x[0], np.ones((1, 2, 3, 3)))
    with pytest.raises(DimensionError):
        conv2d(x, np.ones((1, 2, 5, 5)))
    with pytest.raises(ConfigurationError):
        conv2d(x, np.ones((1, 2, 3, 3)), stride=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**16), st.sampled_from([(2, 2), (3, 3), (2, 1)]))
def test_maxpool_matches_window_max(seed, window_stride):
    window, stride = window_stride
    rng = np.random.default_rng(seed)
    size = window + 2 * stride
    x = rng.normal(size=(2, 3, size, size))
    values, cache = maxpool(x, window, stride)
    for i in range(values.shape[2]):
        for j in range(values.shape[3]):
            patch = x[:, :, i * stride : i * stride + window, j * stride : j * stride + window]
            assert_array_equal(values[:, :, i, j], patch.max(axis=(2, 3)))
    assert_array_equal(pool_gather(x, cache), values)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**16))
def test_unpool_is_adjoint_of_gather(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 4, 6))
    _, cache = maxpool(x, 2)
    a = rng.normal(size=x.shape)
    b = rng.normal(size=cache.output_shape)
    assert inner(pool_gather(a, cache), b) == pytest.approx(inner(a, unpool(b, cache)), rel=1e-12, abs=1e-12)


def test_maxpool_ties_pick_lowest_index():
    _, cache = maxpool(np.zeros((1, 1, 4, 4)), 2)
    assert_array_equal(cache.indices[0, 0], [[0, 2], [8, 10]])


def test_maxpool_requires_tiling():
    with pytest.raises(DimensionError):
        maxpool(np.zeros((1, 1, 5, 4)), 2)


def test_matmul_checks_inner_dimension():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert matmul(np.ones((2, 3)), np.ones((2, 3)), transpose_b=True).shape == (2, 2)


def test_matvec():
    a = np.arange(6.0).reshape(2, 3)
    assert matvec(a, np.ones(3)).tolist() == [3.0, 12.0]
    assert matvec(a, np.ones(2), transpose_a=True).tolist() == [3.0, 5.0, 7.0]
    with pytest.raises(DimensionError):
        matvec(a, np.ones((3, 1)))


def test_hard_sigmoid_mask_is_zero_on_the_boundary():
    z = np.array([-0.5, 0.0, 0.5, 1.0, 1.5])
    assert_array_equal(hard_sigmoid(z), [0.0, 0.0, 0.5, 1.0, 1.0])
    assert_array_equal(hard_sigmoid_mask(z), [0.0, 0.0, 1.0, 0.0, 0.0])


def test_kaiming_uniform_bound_and_dtype():
    rng = np.random.default_rng(0)
    w = kaiming_uniform((64, 9), 9, rng, scale=0.5, dtype=np.dtype("float32"))
    assert w.dtype == np.float32
    assert np.max(np.abs(w)) <= 0.5 * np.sqrt(1.0 / 9) + 1e-7


def test_dtype_for():
    assert dtype_for("f64") == np.float64
    with pytest.raises(ConfigurationError):
        dtype_for("f16")
