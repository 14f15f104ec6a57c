import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chm import tensor as T


def scalar_bilinear(values, n_out):
    """Independent 1D oracle: evaluate the half-pixel bilinear formula sample by sample."""
    n_in = len(values)
    out = []
    for i in range(n_out):
        x = (i + 0.5) * n_in / n_out - 0.5
        x = min(max(x, 0.0), n_in - 1)
        lo = math.floor(x)
        hi = min(lo + 1, n_in - 1)
        f = x - lo
        out.append(values[lo] * (1 - f) + values[hi] * f)
    return out


def test_identity_resize():
    t = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.resize_bilinear_2d(t, 2, 2), t)


@pytest.mark.parametrize("size", [(1, 1), (3, 7), (10, 2)])
def test_constant_preserved(size):
    t = np.full((4, 5), 7.0)
    np.testing.assert_allclose(T.resize_bilinear_2d(t, *size), 7.0, rtol=0, atol=1e-12)


def test_upsample_row_matches_scalar_oracle():
    out = T.resize_bilinear_2d(np.array([[0.0, 1.0]]), 1, 4)
    expected = scalar_bilinear([0.0, 1.0], 4)
    # half-pixel centres 0.5*2/4-0.5 = -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
    assert expected == [0.0, 0.25, 0.75, 1.0]
    np.testing.assert_allclose(out[0], expected, atol=1e-15)


def test_channels_preserved():
    t = np.random.default_rng(0).random((3, 4, 5))
    out = T.resize_bilinear_2d(t, 6, 2)
    assert out.shape == (3, 6, 2)
    for c in range(3):
        np.testing.assert_allclose(out[c], T.resize_bilinear_2d(t[c], 6, 2))


def test_zero_sized_rejected():
    with pytest.raises(ValueError):
        T.resize_bilinear_2d(np.zeros((0, 3)), 2, 2)
    with pytest.raises(ValueError):
        T.resize_bilinear_2d(np.zeros((2, 3)), 0, 2)


def test_resize_4d_identity_and_constant():
    t = np.random.default_rng(1).random((3, 4, 2, 5))
    assert np.array_equal(T.resize_4d(t, t.shape), t)
    np.testing.assert_allclose(T.resize_4d(np.full((2, 3, 4, 5), 7.0), (5, 4, 3, 2)), 7.0, atol=1e-12)


def test_resize_4d_pass_order():
    t = np.random.default_rng(2).random((3, 3, 3, 3))
    a = T.resize_4d(t, (5, 5, 5, 5), first_pair_first=True)
    b = T.resize_4d(t, (5, 5, 5, 5), first_pair_first=False)
    # oracle: compose two independent 2D resizes
    step = np.stack([T.resize_bilinear_2d(t[:, :, k, l], 5, 5) for k in range(3) for l in range(3)], -1)
    step = step.reshape(5, 5, 3, 3)
    ref = np.empty((5, 5, 5, 5))
    for i in range(5):
        for j in range(5):
            ref[i, j] = T.resize_bilinear_2d(step[i, j], 5, 5)
    np.testing.assert_allclose(a, ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b, ref, rtol=0, atol=1e-12)


def test_resize_backward_is_adjoint():
    rng = np.random.default_rng(3)
    x = rng.random((2, 3, 4, 3))
    g = rng.random((5, 4, 2, 6))
    lhs = np.vdot(T.resize_4d(x, g.shape), g)
    rhs = np.vdot(x, T.resize_4d_backward(g, x.shape))
    assert lhs == pytest.approx(rhs, rel=1e-12)
    x2, g2 = rng.random((3, 4, 5)), rng.random((3, 7, 2))
    assert np.vdot(T.resize_bilinear_2d(x2, 7, 2), g2) == pytest.approx(
        np.vdot(x2, T.resize_bilinear_2d_backward(g2, 4, 5)), rel=1e-12
    )


def test_relu_sigmoid():
    assert T.relu([-1.0, 0.0, 2.0]).tolist() == [0.0, 0.0, 2.0]
    assert T.sigmoid(0.0) == 0.5
    x = np.random.default_rng(4).normal(scale=20, size=1000)
    np.testing.assert_allclose(T.sigmoid(x) + T.sigmoid(-x), 1.0, atol=1e-15)
    assert np.all(np.isfinite(T.sigmoid(np.array([-1000.0, 1000.0]))))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=30))
def test_activations_monotone(xs):
    xs = np.sort(np.array(xs))
    assert np.all(np.diff(T.relu(xs)) >= 0)
    assert np.all(np.diff(T.sigmoid(xs)) >= 0)


def test_softmax_closed_forms():
    np.testing.assert_allclose(T.softmax_last2(np.zeros((1, 1, 2, 2))), 0.25)
    out = T.softmax_last2(np.array([0.0, math.log(3)]).reshape(1, 1, 1, 2))
    np.testing.assert_allclose(out.ravel(), [0.25, 0.75], atol=1e-15)


def test_softmax_sums_and_shift_invariance():
    rng = np.random.default_rng(5)
    t = rng.normal(scale=5, size=(3, 2, 4, 5))
    out = T.softmax_last2(t)
    # direct summation oracle
    for i in range(3):
        for j in range(2):
            assert abs(sum(out[i, j].ravel().tolist()) - 1.0) < 1e-12
    shifted = T.softmax_last2(t + rng.normal(size=(3, 2, 1, 1)) * 100)
    np.testing.assert_allclose(shifted, out, atol=1e-12)


@settings(max_examples=50)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=6), st.data())
def test_index_round_trip(shape, data):
    total = int(np.prod(shape))
    linear = data.draw(st.integers(0, total - 1))
    multi = T.unravel_index(linear, shape)
    assert T.ravel_index(multi, shape) == linear
