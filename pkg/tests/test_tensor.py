import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_fd, rms_oracle, rope_oracle, shifted_ce_oracle, softmax_oracle
from unilora.tensor import (
    NonFiniteError,
    ShapeError,
    cross_entropy_shifted,
    embedding,
    embedding_backward,
    matmul,
    matmul_backward,
    rms_norm,
    rms_norm_backward,
    rope,
    silu,
    silu_backward,
    softmax_backward,
    softmax_rows,
)


def test_matmul_matches_dot(rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(matmul(a, b), a.dot(b), rtol=1e-13, atol=1e-14)


def test_matmul_empty_and_shape_errors(rng):
    assert matmul(np.zeros((0, 4)), np.ones((4, 2))).shape == (0, 2)
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 2)))
    with pytest.raises(NonFiniteError):
        matmul(np.array([[np.inf]]), np.ones((1, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 40), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**31))
def test_matmul_row_independent_of_batch(n_before, n_after, k, m, seed):
    # a row's bits must not depend on what else is in the batch
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(k, m))
    row = rng.normal(size=(1, k))
    big = np.vstack([rng.normal(size=(n_before, k)), row, rng.normal(size=(n_after, k))])
    assert np.array_equal(matmul(big, b)[n_before], matmul(row, b)[0])


def test_matmul_backward_fd(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    da, db = matmul_backward(a, b, w)
    np.testing.assert_allclose(da, central_fd(lambda: (matmul(a, b) * w).sum(), a, 1e-6), rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(db, central_fd(lambda: (matmul(a, b) * w).sum(), b, 1e-6), rtol=1e-7, atol=1e-9)


def test_softmax_matches_oracle_and_masks_exactly(rng):
    x = rng.normal(size=(4, 6))
    mask = np.tril(np.ones((4, 6), dtype=bool), k=2)
    y = softmax_rows(x, 0.5, mask)
    for i in range(4):
        idx = np.flatnonzero(mask[i])
        np.testing.assert_allclose(y[i, idx], softmax_oracle(0.5 * x[i, idx]), rtol=1e-13)
        assert (y[i, ~mask[i]] == 0.0).all()
    with pytest.raises(ShapeError):
        softmax_rows(x, 1.0, np.zeros_like(mask))


def test_softmax_backward_fd(rng):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))
    y = softmax_rows(x, 0.7)
    got = softmax_backward(y, w, 0.7)
    fd = central_fd(lambda: (softmax_rows(x, 0.7) * w).sum(), x, 1e-6)
    np.testing.assert_allclose(got, fd, rtol=1e-6, atol=1e-9)


def test_rms_norm_oracle_and_backward(rng):
    x, g = rng.normal(size=(5, 8)), rng.normal(size=8)
    np.testing.assert_allclose(rms_norm(x, g, 1e-6), rms_oracle(x, g, 1e-6), rtol=1e-13)
    w = rng.normal(size=(5, 8))
    dx, dg = rms_norm_backward(x, g, 1e-6, w)
    np.testing.assert_allclose(dx, central_fd(lambda: (rms_norm(x, g, 1e-6) * w).sum(), x, 1e-6), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(dg, central_fd(lambda: (rms_norm(x, g, 1e-6) * w).sum(), g, 1e-6), rtol=1e-6, atol=1e-9)
    with pytest.raises(ShapeError):
        rms_norm(x, np.ones(3), 1e-6)


def test_silu_extremes_and_backward(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        y = silu(np.array([-800.0, 0.0, 800.0]))
    assert y[0] == -0.0 or y[0] == 0.0
    assert y[2] == 800.0
    x = rng.normal(size=(4, 3)) * 3
    w = rng.normal(size=(4, 3))
    np.testing.assert_allclose(silu_backward(x, w), central_fd(lambda: (silu(x) * w).sum(), x, 1e-6),
                               rtol=1e-6, atol=1e-9)


def test_embedding_and_backward(rng):
    table = rng.normal(size=(6, 3))
    ids = np.array([[0, 5, 5], [2, 0, 1]])
    out = embedding(table, ids)
    assert np.array_equal(out[0, 1], table[5])
    dy = rng.normal(size=(2, 3, 3))
    g = embedding_backward(table.shape, ids, dy)
    np.testing.assert_allclose(g[5], dy[0, 1] + dy[0, 2])
    assert (g[3] == 0).all()
    with pytest.raises(ShapeError):
        embedding(table, np.array([6]))


def test_rope_matches_complex_rotation(rng):
    x = rng.normal(size=(7, 2, 8))
    pos = np.arange(3, 10)
    np.testing.assert_allclose(rope(x, pos, 10000.0), rope_oracle(x, pos, 10000.0), rtol=1e-12, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.sampled_from([2, 4, 8, 16]), st.integers(0, 2**31))
def test_rope_is_orthogonal(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3, d))
    pos = rng.integers(0, 500, size=n)
    y = rope(x, pos, 10000.0)
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12)
    np.testing.assert_allclose(rope(y, pos, 10000.0, inverse=True), x, atol=1e-12)


def test_rope_relative_scores():
    # q.k after rotation depends only on the position difference
    rng = np.random.default_rng(5)
    q, k = rng.normal(size=(1, 1, 8)), rng.normal(size=(1, 1, 8))
    s1 = (rope(q, [10], 1e4) * rope(k, [4], 1e4)).sum()
    s2 = (rope(q, [106], 1e4) * rope(k, [100], 1e4)).sum()
    assert abs(s1 - s2) < 1e-12


def test_cross_entropy_matches_loop_oracle(rng):
    logits = rng.normal(size=(6, 9))
    labels = np.array([3, 1, -100, 8, 0, 2])
    loss, grad = cross_entropy_shifted(logits, labels)
    assert abs(loss - shifted_ce_oracle(logits, labels)) < 1e-13
    fd = central_fd(lambda: cross_entropy_shifted(logits, labels)[0], logits, 1e-6)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)
    assert (grad[-1] == 0).all() and (grad[1] == 0).all()


def test_cross_entropy_batched_mean_over_all_valid(rng):
    logits = rng.normal(size=(2, 4, 5))
    labels = np.array([[1, 2, 3, 4], [0, -100, -100, 1]])
    loss, _ = cross_entropy_shifted(logits, labels)
    # 3 valid positions in row 0, 1 in row 1 (label[3]=1 at t=2)
    per = [shifted_ce_oracle(logits[0], labels[0]) * 3, shifted_ce_oracle(logits[1], labels[1]) * 1]
    assert abs(loss - sum(per) / 4) < 1e-13


def test_cross_entropy_errors():
    with pytest.raises(ValueError, match="empty loss support"):
        cross_entropy_shifted(np.zeros((3, 4)), np.array([1, -100, -100]))
    with pytest.raises(ShapeError):
        cross_entropy_shifted(np.zeros((1, 4)), np.array([1]))
    with pytest.raises(ShapeError):
        cross_entropy_shifted(np.zeros((3, 4)), np.array([1, 9, 2]))
