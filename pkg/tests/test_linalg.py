from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import decaying_matrix, eckart_young_error
from loraxs.exceptions import ConvergenceError, ParameterError
from loraxs.linalg import (
    SvdFactors,
    oversamples_for,
    qr_thin,
    read_matrix_text,
    svd_dense,
    truncated_svd,
    write_matrix_text,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- qr_thin


def test_qr_hand_example():
    q, r = qr_thin([[3.0], [4.0]])
    np.testing.assert_allclose(q, [[0.6], [0.8]], atol=1e-15)
    np.testing.assert_allclose(r, [[5.0]], atol=1e-15)


@pytest.mark.parametrize("shape", [(1, 1), (5, 3), (8, 8), (40, 7)])
def test_qr_against_lapack(rng, shape):
    a = rng.standard_normal(shape)
    q, r = qr_thin(a)
    q_ref, r_ref = np.linalg.qr(a)
    signs = np.sign(np.diag(r_ref))
    np.testing.assert_allclose(q, q_ref * signs, atol=1e-12)
    np.testing.assert_allclose(r, r_ref * signs[:, None], atol=1e-12)
    assert np.all(np.diag(r) >= 0)


@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 6)), elements=finite))
@settings(max_examples=60, deadline=None)
def test_qr_properties(a):
    if a.shape[0] < a.shape[1]:
        a = a.T
    q, r = qr_thin(a)
    k = a.shape[1]
    np.testing.assert_allclose(q.T @ q, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(q @ r, a, atol=1e-9 * (1 + np.abs(a).max()))
    assert np.allclose(r, np.triu(r))
    assert np.all(np.diag(r) >= 0)


def test_qr_rank_deficient_flags_columns():
    a = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    q, r, deficient = qr_thin(a, return_deficient=True)
    assert list(deficient) == [False, True]
    np.testing.assert_allclose(q.T @ q, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(q @ r, a, atol=1e-12)


def test_qr_rejects_wide_and_bad_input():
    with pytest.raises(ParameterError, match="rows >= cols"):
        qr_thin(np.ones((2, 3)))
    with pytest.raises(ParameterError):
        qr_thin([[np.nan], [1.0]])


# ---------------------------------------------------------------- svd_dense


def test_svd_diagonal_and_permutation():
    f = svd_dense(np.diag([2.0, 1.0]))
    np.testing.assert_allclose(f.S, [2.0, 1.0])
    np.testing.assert_allclose(np.abs(f.U), np.eye(2), atol=1e-15)
    p = np.array([[0.0, 1.0], [1.0, 0.0]])
    f = svd_dense(p)
    np.testing.assert_allclose(f.S, [1.0, 1.0])
    np.testing.assert_allclose(f.reconstruct(), p, atol=1e-15)


@pytest.mark.parametrize("shape", [(1, 1), (1, 5), (5, 1), (6, 4), (4, 6), (33, 33), (64, 20)])
def test_svd_dense_against_lapack(rng, shape):
    a = rng.standard_normal(shape)
    f = svd_dense(a)
    k = min(shape)
    np.testing.assert_allclose(f.S, np.linalg.svd(a, compute_uv=False), rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(f.U.T @ f.U, np.eye(k), atol=1e-12)
    np.testing.assert_allclose(f.V.T @ f.V, np.eye(k), atol=1e-12)
    np.testing.assert_allclose(f.reconstruct(), a, atol=1e-12)
    assert np.all(np.diff(f.S) <= 0)


def test_svd_zero_matrix_completes_orthonormal_basis():
    f = svd_dense(np.zeros((4, 3)))
    np.testing.assert_array_equal(f.S, np.zeros(3))
    np.testing.assert_allclose(f.U.T @ f.U, np.eye(3), atol=1e-14)
    np.testing.assert_allclose(f.V.T @ f.V, np.eye(3), atol=1e-14)


def test_svd_sign_convention(rng):
    f = svd_dense(rng.standard_normal((7, 5)))
    for j in range(5):
        col = f.U[:, j]
        assert col[np.argmax(np.abs(col))] > 0


def test_svd_errors():
    with pytest.raises(ParameterError, match="limited"):
        svd_dense(np.ones((4, 4)), max_size=3)
    with pytest.raises(ConvergenceError) as info:
        svd_dense(np.random.default_rng(0).standard_normal((8, 8)), max_sweeps=1)
    assert info.value.iterations == 1


@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=finite))
@settings(max_examples=60, deadline=None)
def test_svd_dense_properties(a):
    f = svd_dense(a)
    scale = 1 + np.abs(a).max()
    np.testing.assert_allclose(f.reconstruct(), a, atol=1e-9 * scale)
    np.testing.assert_allclose(f.S, np.linalg.svd(a, compute_uv=False), atol=1e-9 * scale)


# ---------------------------------------------------------------- truncated_svd


def test_truncated_diag():
    f = truncated_svd(np.diag([3.0, 2.0, 1.0]), 2)
    np.testing.assert_allclose(f.S, [3.0, 2.0], rtol=1e-14)
    assert np.linalg.norm(np.diag([3.0, 2.0, 1.0]) - f.reconstruct()) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("r, m, n, expected", [(4, 64, 64, 10), (2, 3, 3, 1), (3, 3, 5, 0), (1, 8, 4, 3)])
def test_oversamples(r, m, n, expected):
    assert oversamples_for(r, m, n) == expected


@pytest.mark.parametrize("m, n, r", [(50, 40, 1), (64, 64, 4), (30, 90, 16), (128, 128, 16)])
def test_truncated_near_eckart_young(m, n, r):
    rng = np.random.default_rng(m * 1000 + n + r)
    a = decaying_matrix(rng, m, n)
    f = truncated_svd(a, r, seed=3)
    err = np.linalg.norm(a - f.reconstruct())
    assert err <= (1 + 1e-6) * eckart_young_error(a, r)
    np.testing.assert_allclose(f.U.T @ f.U, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(f.V.T @ f.V, np.eye(r), atol=1e-10)


@pytest.mark.parametrize("true_rank, r", [(1, 1), (2, 4), (3, 3), (5, 16)])
def test_truncated_exact_on_low_rank(rng, true_rank, r):
    a = rng.standard_normal((40, true_rank)) @ rng.standard_normal((true_rank, 35))
    f = truncated_svd(a, r)
    assert np.linalg.norm(a - f.reconstruct()) <= 1e-8 * np.linalg.norm(a)


def test_truncated_deterministic_and_seed_sensitive(rng):
    a = rng.standard_normal((30, 20))
    f1, f2 = truncated_svd(a, 5, seed=7), truncated_svd(a, 5, seed=7)
    assert f1.U.tobytes() == f2.U.tobytes() and f1.S.tobytes() == f2.S.tobytes()
    assert f1.V.tobytes() == f2.V.tobytes()


def test_truncated_rank_validation():
    with pytest.raises(ParameterError):
        truncated_svd(np.ones((3, 4)), 4)
    with pytest.raises(ParameterError):
        truncated_svd(np.ones((3, 4)), 0)


def test_factors_are_read_only(rng):
    f = truncated_svd(rng.standard_normal((6, 6)), 2)
    assert isinstance(f, SvdFactors) and f.rank_k == 2
    with pytest.raises(ValueError):
        f.U[0, 0] = 1.0


def test_matrix_text_roundtrip(tmp_path, rng):
    a = rng.standard_normal((3, 4))
    path = tmp_path / "w.txt"
    write_matrix_text(path, a)
    np.testing.assert_array_equal(read_matrix_text(path), a)
    (tmp_path / "v.txt").write_text("1 2 3\n")
    assert read_matrix_text(tmp_path / "v.txt").shape == (1, 3)
