import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgmca.matops import NumericalError, gaussian_matrix, pinv, svd


def test_svd_identity():
    np.testing.assert_allclose(svd(np.eye(3)).singular_values, [1, 1, 1])


def test_svd_diagonal():
    np.testing.assert_allclose(svd(np.diag([3.0, 0.0])).singular_values, [3, 0])


def test_svd_reconstruction():
    m = gaussian_matrix(5, 3, seed=0)
    U, s, Vt = svd(m)
    assert np.linalg.norm(U * s @ Vt - m) / np.linalg.norm(m) < 1e-10
    assert np.all(np.diff(s) <= 0)


def test_svd_rejects_nonfinite():
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))


def test_pinv_identity_and_rank_deficient():
    np.testing.assert_allclose(pinv(np.eye(4)), np.eye(4))
    np.testing.assert_allclose(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))


def _penrose(m, mp, tol=1e-8):
    scale = max(1.0, np.linalg.norm(m), np.linalg.norm(mp))
    assert np.linalg.norm(m @ mp @ m - m) <= tol * scale
    assert np.linalg.norm(mp @ m @ mp - mp) <= tol * scale
    assert np.linalg.norm((m @ mp).T - m @ mp) <= tol * scale
    assert np.linalg.norm((mp @ m).T - mp @ m) <= tol * scale


def test_pinv_penrose_4x2():
    m = gaussian_matrix(4, 2, seed=5)
    _penrose(m, pinv(m))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rows=st.integers(1, 6), cols=st.integers(1, 6))
def test_pinv_properties(seed, rows, cols):
    m = gaussian_matrix(rows, cols, seed)
    mp = pinv(m)
    _penrose(m, mp)
    # full-rank Gaussian matrices: pinv is an involution
    np.testing.assert_allclose(pinv(mp), m, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rows=st.integers(2, 6), cols=st.integers(1, 6))
def test_pinv_matches_normal_equations(seed, rows, cols):
    cols = min(cols, rows)
    A = gaussian_matrix(rows, cols, seed)
    X = gaussian_matrix(rows, 3, seed + 7)
    brute = np.linalg.solve(A.T @ A, A.T @ X)
    np.testing.assert_allclose(pinv(A) @ X, brute, atol=1e-8)


def test_pinv_rcond_range():
    with pytest.raises(ValueError):
        pinv(np.eye(2), rcond=0.0)


def test_gaussian_determinism():
    a = gaussian_matrix(2, 2, seed=7)
    b = gaussian_matrix(2, 2, seed=7)
    assert a.tobytes() == b.tobytes()


def test_gaussian_moments():
    g = gaussian_matrix(1000, 1000, seed=1)
    assert abs(g.mean()) < 0.01
    assert abs(g.var() - 1.0) < 0.02


def test_gaussian_dims():
    with pytest.raises(ValueError):
        gaussian_matrix(0, 3, seed=1)


def test_numerical_error_is_runtime_error():
    assert issubclass(NumericalError, RuntimeError)
