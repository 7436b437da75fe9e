import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sffn.tensor import (
    RngStream,
    ShapeError,
    finite_diff_grad,
    gelu,
    gelu_grad,
    matmul,
    softmax,
    topk_indices,
    topk_rows,
)

finite = st.floats(-10, 10, allow_nan=False, width=64)


@st.composite
def matrix_pair(draw):
    n, p, m = (draw(st.integers(1, 6)) for _ in range(3))
    a = draw(arrays(np.float64, (n, p), elements=finite))
    b = draw(arrays(np.float64, (p, m), elements=finite))
    return a, b


@given(matrix_pair())
def test_matmul_matches_python_sum(pair):
    a, b = pair
    got = matmul(a, b)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            assert math.isclose(got[i, j], math.fsum(a[i, p] * b[p, j] for p in range(a.shape[1])),
                                rel_tol=1e-12, abs_tol=1e-9)


@given(matrix_pair())
def test_matmul_rows_do_not_depend_on_neighbours(pair):
    a, b = pair
    full = matmul(a, b)
    for i in range(a.shape[0]):
        assert np.array_equal(matmul(a[i], b), full[i])
    for j in range(b.shape[1]):
        assert np.array_equal(matmul(a, b[:, j]), full[:, j])


def test_matmul_shape_mismatch_reports_dims():
    with pytest.raises(ShapeError, match="inner dims 3 != 4"):
        matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_gelu_reference_values():
    # x * Phi(x) with Phi from the standard library
    for x in (-3.0, -1.0, -0.1, 0.0, 0.5, 1.0, 2.5):
        phi = 0.5 * (1 + math.erf(x / math.sqrt(2)))
        assert gelu(x) == pytest.approx(x * phi, rel=1e-15, abs=1e-300)
    assert gelu(1.0) == pytest.approx(0.8413447460685429, rel=1e-15)


@given(st.floats(-6, 6))
def test_gelu_grad_matches_finite_difference(x):
    num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6
    assert gelu_grad(x) == pytest.approx(num, abs=1e-8)


@given(arrays(np.float64, st.integers(1, 10), elements=finite), st.floats(-50, 50))
def test_softmax_normalized_and_shift_invariant(v, c):
    p = softmax(v)
    assert math.isclose(p.sum(), 1.0, rel_tol=1e-12)
    assert np.allclose(softmax(v + c), p, rtol=1e-9, atol=1e-15)


def test_softmax_empty_rejected():
    with pytest.raises(ValueError):
        softmax(np.array([]))


def test_topk_ties_go_to_lowest_index():
    assert topk_indices([1.0, 3.0, 3.0, 3.0, 0.0], 2).tolist() == [1, 2]
    assert topk_indices([5.0, 5.0, 5.0], 3).tolist() == [0, 1, 2]


def test_topk_k_too_large():
    with pytest.raises(ValueError):
        topk_indices([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        topk_rows(np.zeros((1, 2)), 3)


@given(st.integers(1, 5), st.integers(1, 12), st.data())
def test_topk_rows_matches_stable_sort(N, n, data):
    # integer scores force plenty of ties
    scores = data.draw(arrays(np.float64, (N, n), elements=st.integers(-3, 3).map(float)))
    k = data.draw(st.integers(0, n))
    rows = topk_rows(scores, k)
    for i in range(N):
        oracle = sorted(sorted(range(n), key=lambda j: (-scores[i, j], j))[:k])
        assert rows[i].tolist() == oracle


def test_finite_diff_grad_quadratic():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    x = np.array([0.3, -0.7])
    grad = finite_diff_grad(lambda v: 0.5 * v @ A @ v, x)
    assert np.allclose(grad, A @ x, atol=1e-9)


def test_finite_diff_grad_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda v: float("nan"), np.zeros(2))


def test_rng_stream_reproducible_and_separated():
    a = RngStream(7, "x").generator(3).normal(size=5)
    assert np.array_equal(a, RngStream(7, "x").generator(3).normal(size=5))
    assert not np.array_equal(a, RngStream(7, "y").generator(3).normal(size=5))
    assert not np.array_equal(a, RngStream(7, "x").generator(4).normal(size=5))
    assert not np.array_equal(a, RngStream(8, "x").generator(3).normal(size=5))
    assert RngStream(7, "x").child("c").tag == "x/c"
