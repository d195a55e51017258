import numpy as np
import pytest


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_hermitian(rng, n):
    X = crandn(rng, n, n)
    return (X + X.conj().T) / 2


def random_unitary(rng, n):
    Q, R = np.linalg.qr(crandn(rng, n, n))
    return Q * (np.diag(R) / np.abs(np.diag(R)))[None, :]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def stencil(f, h):
    return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)


def fd_directional(f, h_values=(2e-3, 1e-3, 5e-4, 2.5e-4, 1.25e-4)):
    """4th-order derivative of ``f`` at 0 from a scan of step sizes.

    Returns the smaller-step estimate of the neighbouring pair that agrees
    best, which balances truncation against rounding error.
    """
    est = [stencil(f, h) for h in h_values]
    gaps = [abs(a - b) for a, b in zip(est, est[1:])]
    return est[int(np.argmin(gaps)) + 1]


class InvariantCost:
    """Random real cost of (R, Pi_left, Pi_right) with hand-derived cotangents.

    ``R`` is the truncated reconstruction (``P C P^H`` or ``U S V^H``), the
    projectors are ``PP^H`` (or ``UU^H``, ``VV^H``).  Such costs are invariant
    under any basis change within the kept space, as required by the rules.
    """

    def __init__(self, rng, m, n):
        self.X = crandn(rng, m, n)
        self.Y = crandn(rng, n, m)
        self.Zl = crandn(rng, m, m)
        self.Zr = crandn(rng, n, n)

    def value(self, R, Pl, Pr):
        return float(np.real(np.trace(self.X.conj().T @ R) + np.trace(self.Y @ R @ self.Y @ R)
                             + np.trace(self.Zl @ Pl) + np.trace(self.Zr @ Pr)))

    def grad_R(self, R):
        YRY = self.Y @ R @ self.Y
        return self.X + 2 * YRY.conj().T


def eig_cost_and_cotangents(cost, M, k):
    """Cost of the rank-k truncated eigendecomposition and its (G_C, G_P)."""
    from ctmgrad.tensor import hermitian_eig

    s, U = hermitian_eig(M)
    P, C = U[:, :k], np.diag(s[:k])
    R = P @ C @ P.conj().T
    Pi = P @ P.conj().T
    G_R = cost.grad_R(R)
    G_Pi = cost.Zl.conj().T + cost.Zr.conj().T
    G_P = G_R @ P @ C.conj().T + G_R.conj().T @ P @ C + (G_Pi + G_Pi.conj().T) @ P
    G_C = P.conj().T @ G_R @ P
    return cost.value(R, Pi, Pi), G_C, G_P, P, C


def eig_cost(cost, M, k):
    from ctmgrad.tensor import hermitian_eig

    s, U = hermitian_eig(M)
    P = U[:, :k]
    R = (P * s[:k]) @ P.conj().T
    Pi = P @ P.conj().T
    return cost.value(R, Pi, Pi)


def svd_cost(cost, A, k):
    from ctmgrad.tensor import svd

    U, S, V = svd(A)
    U, S, V = U[:, :k], S[:k], V[:, :k]
    return cost.value((U * S) @ V.conj().T, U @ U.conj().T, V @ V.conj().T)


def svd_cotangents(cost, A, U, S, V):
    R = (U * S) @ V.conj().T
    G_R = cost.grad_R(R)
    G_U = G_R @ V * S[None, :] + (cost.Zl + cost.Zl.conj().T) @ U
    G_V = G_R.conj().T @ U * S[None, :] + (cost.Zr + cost.Zr.conj().T) @ V
    G_S = np.real(np.diag(U.conj().T @ G_R @ V))
    return G_U, G_S, G_V


def hermitian_with_spectrum(rng, kept, rest):
    s = np.concatenate([kept, rest])
    U = random_unitary(rng, len(s))
    return (U * s) @ U.conj().T


def matrix_with_singular_values(rng, m, n, values):
    r = len(values)
    U = random_unitary(rng, m)[:, :r]
    V = random_unitary(rng, n)[:, :r]
    return (U * np.asarray(values)) @ V.conj().T


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
