"""Benchmark physics: ansatz tensors, the anisotropic J1-J2 model, energies.

Energy geometry
---------------
The 2x2 cluster around a plaquette is covered by four copies of the
enlarged corner, one per quadrant, each a rotated copy of the same matrix
thanks to C4V.  Keeping the physical indices of the quadrant's site open
gives ``Q[(x,B), (y,R), i, j]`` (``i`` ket, ``j`` bra), and

    Z          = Tr(M M M M),            M = sum_i Q[..., i, i]
    <h_nn>     = Tr(Q Q M M)  h / Z      (two horizontally adjacent sites)
    <h_nnn>    = Tr(Q M Q M)  h / Z      (two diagonal sites)

Each site owns two nearest-neighbour bonds and two diagonal bonds, so the
energy per site is ``2 <h_nn> + 2 <h_nnn>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ctm import Environment, converge_ctm
from .errors import NumericError, StageError
from .tensor import c4v_orbits, c4v_symmetrize, einsum, einsum_vjp

SX = np.array([[0.0, 1.0], [1.0, 0.0]]) / 2
SY = np.array([[0.0, -1j], [1j, 0.0]]) / 2
SZ = np.array([[1.0, 0.0], [0.0, -1.0]]) / 2

Q_EINSUM = "xlma,ab,btsy,itrcl,jsqdm->xcdyrqij"

# weight of the longer-range singlet tensor in the RVB-type ansatz
RVB_LONG_RANGE_WEIGHT = 0.4
RVB_BREAKING_SEED = 20190611


# --------------------------------------------------------------------------- #
# Hamiltonian                                                                  #
# --------------------------------------------------------------------------- #


def _two_site(a, b):
    return np.real_if_close(np.kron(a, b))


@dataclass(frozen=True)
class Hamiltonian:
    """Anisotropic spin-1/2 J1-J2 model.

    ``h_nn = j1 * sum_a f_a S^a S^a`` with ``f = (-1, 1 + beta, -1 + beta)``;
    ``h_nnn = j1 * j2_over_j1 * S.S``.  At ``beta = 0`` the nearest-neighbour
    term is the Heisenberg coupling after a spin rotation by pi about ``y`` on
    one sublattice.  ``j1 = 0`` gives the zero Hamiltonian.
    """

    beta: float = 0.0
    j2_over_j1: float = 0.5
    j1: float = 1.0

    @property
    def couplings(self) -> tuple[float, float, float]:
        return (-1.0, 1.0 + self.beta, -1.0 + self.beta)

    @property
    def h_nn(self) -> np.ndarray:
        fx, fy, fz = self.couplings
        h = fx * _two_site(SX, SX) + fy * _two_site(SY, SY) + fz * _two_site(SZ, SZ)
        return self.j1 * np.real(h)

    @property
    def h_nnn(self) -> np.ndarray:
        h = _two_site(SX, SX) + _two_site(SY, SY) + _two_site(SZ, SZ)
        return self.j1 * self.j2_over_j1 * np.real(h)

    def to_dict(self) -> dict:
        return {"beta": self.beta, "j2_over_j1": self.j2_over_j1, "j1": self.j1}


def build_hamiltonian(beta: float = 0.0, j2_over_j1: float = 0.5, j1: float = 1.0) -> Hamiltonian:
    return Hamiltonian(float(beta), float(j2_over_j1), float(j1))


# --------------------------------------------------------------------------- #
# ansatz                                                                       #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class AnsatzSpec:
    """``kind`` is one of ``nn_rvb_perturbed``, ``random_c4v``, ``from_file``."""

    kind: str
    beta: float = 0.0
    D: int = 2
    d: int = 2
    seed: int = 0
    path: str | None = None


def _max_normalize(A):
    m = np.max(np.abs(A))
    if m == 0:
        raise NumericError("ansatz tensor vanishes")
    return A / m


def rvb_nn_tensor() -> np.ndarray:
    """Nearest-neighbour RVB tensor, D = 3 (spin-1/2 plus vacuum ``2``).

    Nonzero entries: exactly one virtual leg equals the physical index, the
    other three legs are vacuum.  Bonds are plain identities; with the
    sublattice spin rotation built into ``Hamiltonian`` this is the usual
    singlet covering.
    """
    A = np.zeros((2, 3, 3, 3, 3))
    for i in range(2):
        for leg in range(4):
            idx = [2, 2, 2, 2]
            idx[leg] = i
            A[(i, *idx)] = 1.0
    return A


def rvb_long_range_tensor() -> np.ndarray:
    """Stand-in for the longer-range singlet tensor (D = 3).

    The physical spin is passed to one leg, the neighbouring leg (clockwise)
    is vacuum and the two remaining legs carry a virtual singlet
    ``eps = [[0, 1], [-1, 0]]``.  The result is averaged over C4V.  Every
    entry has three spin legs and one vacuum leg, so it commutes with the
    same spin rotations as :func:`rvb_nn_tensor`.
    """
    eps = np.array([[0.0, 1.0], [-1.0, 0.0]])
    ref = np.zeros((2, 3, 3, 3, 3))
    for i in range(2):
        for p in range(2):
            for q in range(2):
                # legs (t, r, b, l): spin on t, vacuum on r, singlet on (b, l)
                ref[i, i, 2, p, q] = eps[p, q]
    return c4v_symmetrize(ref)


def rvb_breaking_tensor(seed: int = RVB_BREAKING_SEED) -> np.ndarray:
    """Stand-in for the SU(2)-breaking tensor: a fixed random C4V tensor."""
    rng = np.random.default_rng(seed)
    return _max_normalize(c4v_symmetrize(rng.standard_normal((2, 3, 3, 3, 3))))


def build_ansatz(spec: AnsatzSpec) -> np.ndarray:
    if spec.kind == "nn_rvb_perturbed":
        A = (rvb_nn_tensor() + RVB_LONG_RANGE_WEIGHT * rvb_long_range_tensor()
             + spec.beta * rvb_breaking_tensor())
    elif spec.kind == "random_c4v":
        rng = np.random.default_rng(spec.seed)
        A = c4v_symmetrize(rng.standard_normal((spec.d, spec.D, spec.D, spec.D, spec.D)))
    elif spec.kind == "from_file":
        from .io import read_tnt

        if spec.path is None:
            raise ValueError("from_file ansatz needs a path")
        A = read_tnt(spec.path)
        if A.ndim != 5:
            raise ValueError(f"PEPS file must hold a rank-5 tensor, got rank {A.ndim}")
        if np.all(np.isreal(A)):
            A = A.real
    else:
        raise ValueError(f"unknown ansatz kind {spec.kind!r}")
    return _max_normalize(A)


# --------------------------------------------------------------------------- #
# energy                                                                       #
# --------------------------------------------------------------------------- #


def _open_corner(env: Environment, A: np.ndarray) -> np.ndarray:
    chi = env.chi
    D, d = A.shape[1], A.shape[0]
    T4 = env.T.reshape(chi, D, D, chi)
    Q = einsum(Q_EINSUM, T4, env.C, T4, A, A.conj())
    n = chi * D * D
    return Q.reshape(n, n, d, d)


def _bond_tensor(h, d):
    # H4[i1, i2, j1, j2] = h[(j1 j2), (i1 i2)], so <h> = sum rho[i, j] h[j, i]
    return h.reshape(d, d, d, d).transpose(2, 3, 0, 1)


_NN = "acik,cbjl,ijkl,bd,da->"
_NNN = "acik,cd,dbjl,ijkl,ba->"
_Z = "ab,bc,cd,da->"


def _energy_terms(Q, H: Hamiltonian):
    d = Q.shape[2]
    M = np.einsum("abii->ab", Q)
    Hnn = _bond_tensor(H.h_nn, d)
    Hnnn = _bond_tensor(H.h_nnn, d)
    Z = einsum(_Z, M, M, M, M)
    N1 = einsum(_NN, Q, Q, Hnn, M, M)
    N2 = einsum(_NNN, Q, M, Q, Hnnn, M)
    return M, Hnn, Hnnn, Z, N1, N2


def energy(env: Environment, eig, A: np.ndarray, H: Hamiltonian) -> float:
    """Energy per site from a converged environment (``eig`` is unused)."""
    Q = _open_corner(env, np.asarray(A))
    _, _, _, Z, N1, N2 = _energy_terms(Q, H)
    return _finalize(Z, N1, N2)


def _finalize(Z, N1, N2):
    if not Z.real > 0:
        raise NumericError(f"patch norm is not positive ({Z}); contraction degenerate")
    return float(2 * np.real(N1 / Z) + 2 * np.real(N2 / Z))


def energy_vjp(env: Environment, A: np.ndarray, H: Hamiltonian):
    """Energy and its cotangents with respect to ``C``, ``T`` and ``A``.

    Returns ``(E, G_C, G_T, G_A)``; ``G_A`` collects the explicit dependence
    through both ``A`` and ``conj(A)``.
    """
    A = np.asarray(A)
    chi = env.chi
    d, D = A.shape[0], A.shape[1]
    Q = _open_corner(env, A)
    M, Hnn, Hnnn, Z, N1, N2 = _energy_terms(Q, H)
    E = _finalize(Z, N1, N2)

    # E = 2 Re((N1 + N2) / Z)
    g_N = 2.0 / np.conj(Z)
    g_Z = -2.0 * np.conj((N1 + N2) / Z**2)
    ops1 = [Q, Q, Hnn, M, M]
    ops2 = [Q, M, Q, Hnnn, M]
    opsz = [M, M, M, M]
    G_Q = einsum_vjp(_NN, ops1, g_N, 0) + einsum_vjp(_NN, ops1, g_N, 1)
    G_Q = G_Q + einsum_vjp(_NNN, ops2, g_N, 0) + einsum_vjp(_NNN, ops2, g_N, 2)
    G_M = einsum_vjp(_NN, ops1, g_N, 3) + einsum_vjp(_NN, ops1, g_N, 4)
    G_M = G_M + einsum_vjp(_NNN, ops2, g_N, 1) + einsum_vjp(_NNN, ops2, g_N, 4)
    for k in range(4):
        G_M = G_M + einsum_vjp(_Z, opsz, g_Z, k)
    G_Q = G_Q.astype(np.result_type(G_Q, G_M), copy=True)
    for i in range(d):
        G_Q[:, :, i, i] += G_M

    T4 = env.T.reshape(chi, D, D, chi)
    ops = [T4, env.C, T4, A, A.conj()]
    G_Q8 = G_Q.reshape(chi, D, D, chi, D, D, d, d)
    G_T4 = einsum_vjp(Q_EINSUM, ops, G_Q8, 0) + einsum_vjp(Q_EINSUM, ops, G_Q8, 2)
    G_C = einsum_vjp(Q_EINSUM, ops, G_Q8, 1)
    G_A = einsum_vjp(Q_EINSUM, ops, G_Q8, 3) + np.conj(einsum_vjp(Q_EINSUM, ops, G_Q8, 4))
    return E, G_C, G_T4.reshape(env.T.shape), G_A


# --------------------------------------------------------------------------- #
# finite differences                                                           #
# --------------------------------------------------------------------------- #


def c4v_parameter_basis(d: int, D: int) -> list[np.ndarray]:
    """Orthonormal basis of real C4V-symmetric rank-5 tensors."""
    basis = []
    for i in range(d):
        for orbit in c4v_orbits(D):
            B = np.zeros((d, D, D, D, D))
            for idx in orbit:
                B[(i, *idx)] = 1.0
            basis.append(B / np.sqrt(len(orbit)))
    return basis


def stencil_derivative(f: Callable[[float], float], h: float) -> float:
    """Fourth-order central difference ``f'(0)``."""
    return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)


def scanned_derivative(f: Callable[[float], float], h_base: float) -> tuple[float, float]:
    """Fourth-order derivative with step chosen from ``h_base * (1/2, 1, 2)``.

    The three stencils share their points (8 evaluations).  The pair of
    neighbouring step sizes whose estimates agree best is taken, and within it
    the smaller step.  Returns ``(derivative, step)``.
    """
    hs = [h_base / 2, h_base, 2 * h_base]
    cache: dict[float, float] = {}

    def fc(x):
        if x not in cache:
            cache[x] = f(x)
        return cache[x]

    est = [stencil_derivative(fc, h) for h in hs]
    d_lo = abs(est[0] - est[1])
    d_hi = abs(est[1] - est[2])
    k = 0 if d_lo <= d_hi else 1
    return est[k], hs[k]


def finite_diff_gradient(A: np.ndarray, H: Hamiltonian, chi: int, order: int = 4,
                         h_base: float = 1e-3, ctm_tol: float = 1e-13,
                         maxiter: int = 5000,
                         energy_fn: Callable[[np.ndarray], float] | None = None) -> np.ndarray:
    """Finite-difference gradient in the real C4V-symmetric parameter space.

    Every energy evaluation converges a fresh CTM from the default start (no
    warm starts).  ``energy_fn`` replaces the CTM energy, which is how the
    stencil itself is tested.  Returns the gradient as a rank-5 tensor
    (the orthogonal projection of the full gradient onto the symmetric
    subspace).
    """
    if order != 4:
        raise ValueError("only the 4th-order stencil is implemented")
    A = np.asarray(A, dtype=float)
    if energy_fn is None and not (np.any(H.h_nn) or np.any(H.h_nnn)):
        return np.zeros_like(A)
    if energy_fn is None:
        def energy_fn(X):
            res = converge_ctm(X, chi, tol=ctm_tol, maxiter=maxiter)
            return energy(res.env, res.eig, X, H)

    grad = np.zeros_like(A)
    for n, B in enumerate(c4v_parameter_basis(A.shape[0], A.shape[1])):
        try:
            g, _ = scanned_derivative(lambda t: energy_fn(A + t * B), h_base)
        except NumericError as exc:
            raise StageError(f"finite differences, parameter {n}", exc) from exc
        grad += g * B
    return grad
