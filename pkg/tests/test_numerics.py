import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrbpfl.numerics import (
    RngStream,
    ShapeError,
    gaussian_draw,
    hadamard,
    matmul,
    sigmoid,
    softmax_cross_entropy,
    softplus,
    softplus_inv,
)


def test_matmul_identity_and_zero():
    A = np.array([[1.0, -2.0, 3.0], [0.5, 4.0, -1.0]])
    assert np.array_equal(matmul(np.eye(2), A), A)
    assert np.array_equal(matmul(np.zeros((4, 2)), A), np.zeros((4, 3)))


def test_matmul_hand_example():
    out = matmul([[1, 2], [3, 4]], [[0], [1]])
    assert out.tolist() == [[2.0], [4.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_hadamard_examples():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(hadamard(A, np.ones_like(A)), A)
    assert np.array_equal(hadamard(A, np.zeros_like(A)), np.zeros_like(A))
    assert hadamard(A, [[2, 0], [0, 2]]).tolist() == [[2, 0], [0, 8]]
    with pytest.raises(ShapeError):
        hadamard(A, np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matmul_associative(seed):
    g = np.random.default_rng(seed)
    a, b, c = g.normal(size=(3, 4)), g.normal(size=(4, 2)), g.normal(size=(2, 5))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=0, atol=1e-9)


@pytest.mark.parametrize("classes", [2, 5, 10])
def test_cross_entropy_uniform_logits(classes):
    loss, _ = softmax_cross_entropy(np.zeros((3, classes)), [0, classes - 1, 1])
    assert loss == pytest.approx(math.log(classes), rel=1e-14)


def test_cross_entropy_saturated():
    loss, _ = softmax_cross_entropy([[10.0, -10.0]], [0])
    # -log(e^10 / (e^10 + e^-10)) = log1p(e^-20)
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
    assert loss == pytest.approx(2.06e-9, rel=1e-3)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError, match="labels"):
        softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_gradient_matches_central_differences(seed):
    g = np.random.default_rng(seed)
    logits = g.normal(size=(4, 5)) * 2
    labels = g.integers(0, 5, 4)
    _, grad = softmax_cross_entropy(logits, labels)
    h = 1e-5
    num = np.zeros_like(logits)
    for i in np.ndindex(logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[i] += h
        dn[i] -= h
        num[i] = (softmax_cross_entropy(up, labels)[0] - softmax_cross_entropy(dn, labels)[0]) / (2 * h)
    rel = np.abs(grad - num) / np.maximum(np.maximum(np.abs(grad), np.abs(num)), 1e-3)
    assert rel.max() <= 1e-6


def test_softplus_roundtrip_and_sigmoid_tails():
    y = np.array([1e-6, 0.05, 0.316, 3.0, 40.0])
    np.testing.assert_allclose(softplus(softplus_inv(y)), y, rtol=1e-12)
    s = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_rng_same_path_same_draws():
    a = gaussian_draw(RngStream(7, ("round", 3, "client", 2)), 5)
    b = gaussian_draw(RngStream(7, ("round", 3, "client", 2)), 5)
    assert np.array_equal(a, b)


def test_rng_paths_and_seeds_differ():
    base = RngStream(7)
    draws = [
        gaussian_draw(base.child("round", 3), 8),
        gaussian_draw(base.child("round", 4), 8),
        gaussian_draw(base.child("round", "3"), 8),
        gaussian_draw(RngStream(8).child("round", 3), 8),
    ]
    for i in range(len(draws)):
        for j in range(i + 1, len(draws)):
            assert not np.array_equal(draws[i], draws[j])


def test_rng_child_is_order_independent():
    root = RngStream(1)
    first = gaussian_draw(root.child("client", 5), 3)
    gaussian_draw(root.child("client", 9), 100)
    assert np.array_equal(first, gaussian_draw(root.child("client", 5), 3))


def test_gaussian_moments_within_clt_bounds():
    x = gaussian_draw(RngStream(2024, ("moments",)), 10**6)
    assert abs(x.mean()) < 4 / math.sqrt(10**6)
    assert 0.99 <= x.var() <= 1.01


def test_gaussian_draw_rejects_empty():
    with pytest.raises(ValueError):
        gaussian_draw(RngStream(0), 0)
