import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ragkv.numerics import (DegenerateRowError, ShapeError, matmul, rmsnorm, silu, softmax_rows,
                               swiglu)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            acc = 0.0
            for k in range(len(b)):
                acc += a[i][k] * b[k][j]
            out[i][j] = acc
    return out


def test_matmul_scalar():
    assert matmul(np.array([[2.0]]), np.array([[3.0]]))[0, 0] == 6.0


def test_matmul_identity_is_bit_exact():
    m = np.random.default_rng(0).standard_normal((3, 3))
    assert np.array_equal(matmul(np.eye(3), m), m)


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 2))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a.tolist(), b.tolist()), rtol=0, atol=1e-14)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestSoftmax:
    def test_symmetric_row(self):
        assert softmax_rows(np.array([[0.0, 0.0]])).tolist() == [[0.5, 0.5]]

    def test_masked_entry_is_exactly_zero(self):
        out = softmax_rows(np.array([[1.7, -np.inf]]))
        assert out[0, 0] == 1.0 and out[0, 1] == 0.0

    def test_against_extended_precision(self):
        # exp-normalize of [1, 2, 3] at 50 digits (mpmath)
        expected = [0.0900305731703804579980221, 0.2447284710547976524729596, 0.6652409557748218895290183]
        np.testing.assert_allclose(softmax_rows(np.array([[1.0, 2.0, 3.0]]))[0], expected, rtol=0, atol=1e-15)

    def test_degenerate_row(self):
        with pytest.raises(DegenerateRowError):
            softmax_rows(np.array([[0.0, 1.0], [-np.inf, -np.inf]]))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite))
    def test_rows_sum_to_one(self, m):
        out = softmax_rows(m)
        assert np.all((out >= 0) & (out <= 1))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_pure(self):
        m = np.random.default_rng(3).standard_normal((4, 4))
        before = m.copy()
        a, b = softmax_rows(m), softmax_rows(m)
        assert np.array_equal(a, b) and np.array_equal(m, before)


class TestRmsnorm:
    def test_unit_rms(self):
        assert rmsnorm(np.ones(4), np.ones(4), eps=0.0).tolist() == [1.0, 1.0, 1.0, 1.0]

    def test_zero_input(self):
        assert rmsnorm(np.zeros(5), np.ones(5)).tolist() == [0.0] * 5
        assert rmsnorm(np.zeros(5), np.ones(5), eps=0.0).tolist() == [0.0] * 5

    def test_direct_formula(self):
        rng = np.random.default_rng(11)
        x, w = rng.standard_normal(16), rng.standard_normal(16)
        denom = math.sqrt(sum(v * v for v in x) / len(x) + 1e-6)
        expected = [xi / denom * wi for xi, wi in zip(x, w)]
        np.testing.assert_allclose(rmsnorm(x, w, 1e-6), expected, rtol=1e-14, atol=0)


class TestSwiglu:
    def test_zero(self):
        w = np.random.default_rng(0).standard_normal((4, 6))
        assert np.array_equal(swiglu(np.zeros(4), w, w, w.T), np.zeros(4))

    def test_scalar_toy(self):
        one = np.ones((1, 1))
        # silu(1) at 50 digits
        assert swiglu(np.array([1.0]), one, one, one)[0] == pytest.approx(0.7310585786300048792, abs=1e-15)

    def test_direct_formula(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(3)
        g, u, d = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((4, 3))
        hidden = []
        for j in range(4):
            zg = sum(x[i] * g[i, j] for i in range(3))
            zu = sum(x[i] * u[i, j] for i in range(3))
            hidden.append(zg / (1 + math.exp(-zg)) * zu)
        expected = [sum(hidden[j] * d[j, k] for j in range(4)) for k in range(3)]
        np.testing.assert_allclose(swiglu(x, g, u, d), expected, rtol=1e-13, atol=1e-15)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            swiglu(np.ones(3), np.ones((4, 2)), np.ones((4, 2)), np.ones((2, 3)))

    def test_silu_large_negative_is_finite(self):
        assert silu(np.array([-1e4]))[0] == 0.0
