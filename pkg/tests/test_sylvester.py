import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmgrad.errors import NonConvergenceError, NumericError
from ctmgrad.sylvester import solve_sylvester, sylvester_operator
from ctmgrad.tensor import LinearMap

from conftest import crandn


def dense_solve(M, C, P, rhs):
    """Direct solve of gamma C - M (1 - P P^H) gamma = rhs via Kronecker products."""
    n, k = rhs.shape
    Pi = np.eye(n) - P @ P.conj().T
    # row-major vec: vec(X B) = (1 kron B^T) vec X, vec(A X) = (A kron 1) vec X
    K = np.kron(np.eye(n), C.T) - np.kron(M @ Pi, np.eye(k))
    return np.linalg.solve(K, rhs.ravel()).reshape(n, k)


def separated_instance(rng, n, k, gap=3.0):
    """Hermitian M with the k dominant eigenvalues well above the rest; P spans them."""
    U = np.linalg.qr(crandn(rng, n, n))[0]
    s = np.concatenate([gap + rng.random(k), rng.uniform(-1, 1, n - k)])
    M = (U * s) @ U.conj().T
    P = U[:, :k]
    C = np.diag(s[:k])
    return M, P, C


def test_zero_map_identity_corner(rng):
    R = crandn(rng, 4, 2)
    sol = solve_sylvester(lambda g: np.zeros_like(g), np.eye(2), R)
    np.testing.assert_allclose(sol.gamma, R, atol=1e-12)


def test_columnwise_division():
    sol = solve_sylvester(lambda g: np.zeros_like(g), np.diag([2.0, 1.0]),
                          np.array([[2.0, 1.0], [4.0, 2.0]]))
    np.testing.assert_allclose(sol.gamma, [[1, 1], [2, 2]], atol=1e-12)


def test_zero_rhs():
    sol = solve_sylvester(lambda g: g, np.eye(2), np.zeros((3, 2)))
    assert sol.iterations == 0 and not np.any(sol.gamma)


def test_against_dense_solve(rng):
    M, P, C = separated_instance(rng, 20, 4)
    rhs = crandn(rng, 20, 4)
    sol = solve_sylvester(LinearMap.from_matrix(M), C, rhs, P=P, tol=1e-12)
    ref = dense_solve(M, C, P, rhs)
    assert sol.residual <= 1e-12
    assert np.max(np.abs(sol.gamma - ref)) <= 1e-9 * np.max(np.abs(ref))


def test_reported_residual_is_recomputed(rng):
    M, P, C = separated_instance(rng, 12, 3)
    rhs = crandn(rng, 12, 3)
    sol = solve_sylvester(LinearMap.from_matrix(M), C, rhs, P=P)
    op = sylvester_operator(LinearMap.from_matrix(M), C, P)
    indep = np.linalg.norm(op(sol.gamma) - rhs) / np.linalg.norm(rhs)
    assert abs(indep - sol.residual) <= 1e-14


def test_singular_corner_with_preconditioner(rng):
    with pytest.raises(NumericError, match="singular"):
        solve_sylvester(lambda g: g, np.diag([1.0, 0.0]), crandn(rng, 3, 2))


def test_nonconvergence_carries_residual(rng):
    M, P, C = separated_instance(rng, 30, 4)
    with pytest.raises(NonConvergenceError) as info:
        solve_sylvester(LinearMap.from_matrix(M), C, crandn(rng, 30, 4), P=P, tol=1e-14,
                        maxiter=1, precond=False)
    assert info.value.residual > 1e-14


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(4, 20), k=st.integers(1, 4))
def test_property_residual_and_dense_agreement(seed, n, k):
    rng = np.random.default_rng(seed)
    k = min(k, n - 1)
    M, P, C = separated_instance(rng, n, k)
    rhs = crandn(rng, n, k)
    sol = solve_sylvester(LinearMap.from_matrix(M), C, rhs, P=P)
    assert sol.residual <= 1e-10
    ref = dense_solve(M, C, P, rhs)
    assert np.max(np.abs(sol.gamma - ref)) <= 1e-9 * max(1.0, np.max(np.abs(ref)))
