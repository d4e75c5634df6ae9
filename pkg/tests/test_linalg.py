import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scn import linalg
from scn.exceptions import ContractViolation, NotPositiveDefinite

from oracles import jacobi_eigenvalues, naive_matmul


def test_matmul_identity():
    M = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(linalg.matmul(np.eye(2), M), M)


def test_matmul_hand_checked():
    out = linalg.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(out, [[3.0], [7.0]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((5, 7))
    B = rng.standard_normal((7, 3))
    np.testing.assert_allclose(linalg.matmul(A, B), naive_matmul(A, B), rtol=1e-13, atol=1e-13)


def test_matmul_dimension_mismatch():
    with pytest.raises(ContractViolation):
        linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_matmul_associative_on_integers(n, k, m, seed):
    rng = np.random.default_rng(seed)
    A = rng.integers(-5, 6, (n, k)).astype(float)
    B = rng.integers(-5, 6, (k, m)).astype(float)
    C = rng.integers(-5, 6, (m, 3)).astype(float)
    left = linalg.matmul(linalg.matmul(A, B), C)
    right = linalg.matmul(A, linalg.matmul(B, C))
    assert np.array_equal(left, right)


def test_spd_solve_diagonal():
    np.testing.assert_allclose(linalg.spd_solve(2 * np.eye(3), np.eye(3)), 0.5 * np.eye(3), rtol=0, atol=1e-15)


def test_spd_solve_identity():
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(linalg.spd_solve(np.eye(3), b), b, rtol=0, atol=0)


@pytest.mark.parametrize("seed", range(10))
def test_spd_solve_residual(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((9, 7))
    G = M.T @ M + 0.1 * np.eye(7)
    B = rng.standard_normal((7, 4))
    X = linalg.spd_solve(G, B)
    assert np.linalg.norm(G @ X - B) <= 1e-8 * np.linalg.norm(B)


def test_spd_solve_ill_conditioned_residual():
    rng = np.random.default_rng(11)
    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    G = Q @ np.diag(np.logspace(0, 6, 8)) @ Q.T
    G = 0.5 * (G + G.T)
    B = rng.standard_normal((8, 3))
    X = linalg.spd_solve(G, B)
    assert np.linalg.norm(G @ X - B) <= 1e-8 * np.linalg.norm(B)


def test_spd_solve_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        linalg.spd_solve(np.diag([1.0, -1.0]), np.ones(2))


def test_batched_cholesky_solve_matches_dense():
    rng = np.random.default_rng(5)
    M = rng.standard_normal((20, 6, 6))
    G = M @ M.transpose(0, 2, 1) + 0.1 * np.eye(6)
    b = rng.standard_normal((20, 6))
    x = linalg.cho_solve_batched(linalg.cholesky_batched(G), b)
    np.testing.assert_allclose(np.einsum("pij,pj->pi", G, x), b, atol=1e-10)


def test_eigenvalue_identity():
    kappa = linalg.dominant_eigenvalue(np.eye(2), 0.1, safety=1.0)
    assert kappa == pytest.approx(1.1, abs=1e-12)
    # the default safety factor only inflates the Gram part
    assert linalg.dominant_eigenvalue(np.eye(2), 0.1) == pytest.approx(1.01 + 0.1, abs=1e-12)


def test_eigenvalue_diagonal():
    assert linalg.dominant_eigenvalue(np.diag([2.0, 1.0]), 0.0, safety=1.0) == pytest.approx(4.0, rel=1e-9)


def test_eigenvalue_zero_matrix_is_lambda2():
    assert linalg.dominant_eigenvalue(np.zeros((3, 4)), 0.25) == 0.25


@pytest.mark.parametrize("seed", range(5))
def test_eigenvalue_against_jacobi(seed):
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((8, 12))
    lam2 = 0.05
    true = jacobi_eigenvalues(D.T @ D)[-1] + lam2
    est = linalg.dominant_eigenvalue(D, lam2, rng=np.random.default_rng(seed + 100))
    assert est >= 0.99 * true
    assert est <= 1.01 * true + 1e-9
    raw = linalg.dominant_eigenvalue(D, lam2, rng=np.random.default_rng(seed + 100), safety=1.0)
    assert raw >= 0.99 * true


def test_eigenvalue_shift_is_exact():
    rng = np.random.default_rng(1)
    D = rng.standard_normal((6, 9))
    v0 = rng.standard_normal(9)
    for delta in (1e-3, 0.1, 2.0):
        a = linalg.dominant_eigenvalue(D, 0.01, v0=v0)
        b = linalg.dominant_eigenvalue(D, 0.01 + delta, v0=v0)
        assert b - a == pytest.approx(delta, abs=1e-6)


def test_eigenvalue_warm_start_returns_vector():
    D = np.diag([3.0, 1.0, 0.5])
    kappa, v = linalg.dominant_eigenvalue(D, 0.0, return_vector=True, safety=1.0)
    assert kappa == pytest.approx(9.0, rel=1e-9)
    assert abs(v[0]) == pytest.approx(1.0, abs=1e-6)
