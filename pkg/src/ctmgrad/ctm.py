"""Symmetric corner-transfer-matrix contraction of a C4V-symmetric iPEPS.

Index conventions
-----------------
``A[i, t, r, b, l]``
    PEPS tensor, physical index first, virtual legs top/right/bottom/left.
``a[(t t'), (r r'), (b b'), (l l')]``
    double tensor, each leg of dimension ``D**2``; the ket index (from ``A``)
    is the major one of each fused pair, the bra index (from ``conj(A)``) the
    minor one.
``C[alpha, beta]``
    corner; diagonal after every step.
``T[x, k, y]``
    edge tensor.  ``x`` and ``y`` are the two environment legs read clockwise
    around the centre, ``k`` is the fused leg pointing at the centre.  Each
    slice ``T[:, k, :]`` is Hermitian.

The enlarged corner is the matrix

    M[(x, B), (y, R)] = sum T[x, L, al] C[al, be] T[be, U, y] a[U, R, B, L]

built from the upper-left corner, the left edge, the top edge and one double
tensor.  Its rows are the bottom boundary (``x`` and the bottom leg of ``a``),
its columns the right boundary.  Contractions always use ``A`` and ``conj(A)``
separately, which is cheaper than going through the dense double tensor.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse.linalg import eigsh

from .errors import NonConvergenceError, NumericError, ShapeError
from .tensor import LinearMap, einsum, hermitian_eig

DENSE_LIMIT = 4096

CORNER_EINSUM = "xlma,ab,btsy,itrcl,isqdm->xcdyrq"
EDGE_EINSUM = "xcdg,xlmz,itrcl,isqdm,ztsh->grqh"


class MultipletSplitWarning(UserWarning):
    """The truncation had to cut through a (near-)degenerate multiplet."""


# --------------------------------------------------------------------------- #
# data                                                                         #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class DoubleTensor:
    """PEPS tensor together with its (lazily built) double-layer contraction."""

    A: np.ndarray

    @cached_property
    def layer_matrix(self) -> np.ndarray:
        """Double tensor as a (D**4, D**4) matrix, rows (l l' t t'), columns (b b' r r').

        This is the grouping used by the matrix-product forms of the corner and
        edge contractions.
        """
        A = self.A
        D = self.D
        a = np.einsum("itrcl,isqdm->lmtscdrq", A, A.conj())
        return a.reshape(D**4, D**4)

    @property
    def D(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def a(self) -> np.ndarray:
        A = self.A
        D = self.D
        a = np.einsum("itrbl,iTRBL->tTrRbBlL", A, A.conj())
        return a.reshape(D * D, D * D, D * D, D * D)


@dataclass
class Environment:
    """Corner ``C`` (chi x chi) and edge ``T`` (chi, D**2, chi).

    ``gauge`` records the transformation applied by gauge fixing, if any.
    """

    C: np.ndarray
    T: np.ndarray
    gauge: object | None = field(default=None, compare=False)

    def __post_init__(self):
        C, T = np.asarray(self.C), np.asarray(self.T)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ShapeError(f"corner must be square, got {C.shape}")
        if T.ndim != 3 or T.shape[0] != T.shape[2] or T.shape[0] != C.shape[0]:
            raise ShapeError(f"edge shape {T.shape} incompatible with corner {C.shape}")
        self.C, self.T = C, T

    @property
    def chi(self) -> int:
        return self.C.shape[0]

    @property
    def spectrum(self) -> np.ndarray:
        return np.diag(self.C).real.copy()

    def copy(self) -> "Environment":
        return Environment(self.C.copy(), self.T.copy())


@dataclass
class TruncatedEig:
    """Kept eigenspace of the enlarged corner.

    ``P`` is the (chi*D**2, chi_eff) isometry, ``C = P^dagger M P`` the
    unnormalized kept block (diagonal right after the eigensolver) and
    ``s_full`` the spectrum the truncation was decided on.
    """

    P: np.ndarray
    C: np.ndarray
    s_full: np.ndarray
    chi_eff: int
    split_multiplet: bool = False

    @property
    def s_kept(self) -> np.ndarray:
        return np.diag(self.C).real.copy()


@dataclass
class CTMResult:
    env: Environment
    env_prev: Environment
    eig: TruncatedEig
    niter: int
    distance: float
    history: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


# --------------------------------------------------------------------------- #
# building blocks                                                              #
# --------------------------------------------------------------------------- #


def build_double_tensor(A: np.ndarray) -> DoubleTensor:
    A = np.asarray(A)
    if A.ndim != 5:
        raise ShapeError(f"PEPS tensor must have rank 5, got shape {A.shape}")
    if len(set(A.shape[1:])) != 1:
        raise ShapeError(f"virtual dimensions must be equal, got {A.shape[1:]}")
    return DoubleTensor(A)


def _as_double(a) -> DoubleTensor:
    return a if isinstance(a, DoubleTensor) else build_double_tensor(a)


def _check_env(env: Environment, dt: DoubleTensor):
    D = dt.D
    if env.T.shape[1] != D * D:
        raise ShapeError(f"edge leg has dimension {env.T.shape[1]}, expected D^2 = {D * D}")


def _edge4(env: Environment, D: int) -> np.ndarray:
    chi = env.chi
    return env.T.reshape(chi, D, D, chi)


def enlarged_corner_dense(env: Environment, a) -> np.ndarray:
    """Dense Hermitian enlarged corner of size (chi*D**2, chi*D**2)."""
    dt = _as_double(a)
    _check_env(env, dt)
    D, chi = dt.D, env.chi
    D2 = D * D
    # same contraction as CORNER_EINSUM, written as three matrix products
    TC = (env.T.reshape(chi * D2, chi) @ env.C).reshape(chi * D2, chi)
    TT = (TC @ env.T.reshape(chi, D2 * chi)).reshape(chi, D2, D2, chi)
    TT = TT.transpose(0, 3, 1, 2).reshape(chi * chi, D2 * D2)
    M6 = (TT @ dt.layer_matrix).reshape(chi, chi, D2, D2)
    n = chi * D2
    M = M6.transpose(0, 2, 1, 3).reshape(n, n)
    return 0.5 * (M + M.conj().T)


def build_enlarged_corner(env: Environment, a, dense: bool | None = None):
    """Enlarged corner as a :class:`LinearMap` and, if affordable, densely.

    Returns ``(linear_map, M)`` where ``M`` is ``None`` when the dimension
    exceeds ``DENSE_LIMIT`` (or ``dense=False``).  The map applies the
    Hermitian part ``(M + M^dagger) / 2``.
    """
    dt = _as_double(a)
    _check_env(env, dt)
    D, chi = dt.D, env.chi
    n = chi * D * D
    if dense is None:
        dense = n <= DENSE_LIMIT
    if dense:
        M = enlarged_corner_dense(env, dt)
        return LinearMap.from_matrix(M), M

    T4 = _edge4(env, D)
    C = env.C
    A, Ac = dt.A, dt.A.conj()

    def apply(v):
        vec = v.ndim == 1
        X = v.reshape(chi, D, D, -1)
        fwd = einsum("xlma,ab,btsy,itrcl,isqdm,yrqk->xcdk", T4, C, T4, A, Ac, X)
        adj = einsum("xlma,ab,btsy,itrcl,isqdm,xcdk->yrqk",
                     T4.conj(), C.conj(), T4.conj(), Ac, A, X)
        out = 0.5 * (fwd + adj).reshape(n, -1)
        return out[:, 0] if vec else out

    return LinearMap(n, n, apply), None


def project_edge(env: Environment, a, P: np.ndarray) -> np.ndarray:
    """Absorb one double tensor into the edge and renormalize with ``P``.

    ``T'[g, R, h] = sum conj(P[(x, B), g]) T[x, L, z] a[U, R, B, L] P[(z, U), h]``
    """
    dt = _as_double(a)
    D, chi = dt.D, env.chi
    D2 = D * D
    k = P.shape[1]
    # same contraction as EDGE_EINSUM, written as three matrix products
    TP = (env.T.reshape(chi * D2, chi) @ P.reshape(chi, D2 * k)).reshape(chi, D2, D2, k)
    TP = TP.transpose(0, 3, 1, 2).reshape(chi * k, D2 * D2)
    X = (TP @ dt.layer_matrix).reshape(chi, k, D2, D2)            # (x, h, B, R)
    X = X.transpose(0, 2, 1, 3).reshape(chi * D2, k * D2)
    Tn = (P.conj().T @ X).reshape(k, k, D2)                        # (g, h, R)
    return Tn.transpose(0, 2, 1)


def symmetrize_edge(T: np.ndarray) -> np.ndarray:
    """Hermitian part of every slice ``T[:, k, :]``."""
    return 0.5 * (T + T.conj().transpose(2, 1, 0))


def _split_at(s, k, multiplet_tol):
    scale = max(abs(s[0]), 1e-300)
    return (abs(s[k - 1]) - abs(s[k])) / scale < multiplet_tol


def truncate_spectrum(s_full: np.ndarray, chi_target: int, multiplet_tol: float = 1e-8,
                      zero_tol: float = 0.0) -> int:
    """Number of eigenvalues to keep without cutting through a multiplet.

    ``s_full`` must be sorted by descending magnitude.  If the cut after
    ``chi_target`` values falls inside a multiplet (relative gap below
    ``multiplet_tol``), it is moved up to the nearest real gap.  If there is
    no gap above, ``chi_target`` is kept and a :class:`MultipletSplitWarning`
    is issued.  Eigenvalues with ``|s| <= zero_tol * |s_0|`` are always
    dropped (at least one value is kept).
    """
    chi, split = _truncate(np.asarray(s_full), chi_target, multiplet_tol, zero_tol)
    if split:
        warnings.warn(f"truncation at chi={chi} splits a multiplet (no gap above)",
                      MultipletSplitWarning, stacklevel=2)
    return chi


def _truncate(s, chi_target, multiplet_tol, zero_tol):
    if s.size == 0:
        raise ShapeError("empty spectrum")
    if chi_target < 1:
        raise ValueError("chi_target must be at least 1")
    n = len(s)
    if zero_tol > 0:
        nonzero = int(np.sum(np.abs(s) > zero_tol * abs(s[0])))
        n = max(1, nonzero)
    if chi_target >= n:
        return n, False
    k = chi_target
    while k >= 1 and _split_at(s, k, multiplet_tol):
        k -= 1
    if k == 0:
        return chi_target, True
    return k, False


# --------------------------------------------------------------------------- #
# one step                                                                     #
# --------------------------------------------------------------------------- #


@dataclass
class StepCache:
    """Intermediates of :func:`step_with_isometry` needed by the backward pass."""

    C_raw: np.ndarray
    T_raw: np.ndarray
    T_sym: np.ndarray
    k_C: int
    k_T: int
    n_C: float
    n_T: float
    k_sign: int = -1
    sign_T: float = 1.0


def _argmax_abs(X: np.ndarray) -> int:
    return int(np.argmax(np.abs(X).ravel()))


def _edge_sign(T_sym: np.ndarray, k_sign: int | None) -> tuple[int, float]:
    """Sign of the trace of one ket=bra slice of the edge.

    Slice traces are invariant under any unitary gauge, so fixing their sign
    removes the ``T -> -T`` ambiguity without breaking gauge covariance.
    Returns ``(-1, 1.0)`` when all such traces vanish.
    """
    D = math.isqrt(T_sym.shape[1])
    diag = [i * D + i for i in range(D)]
    tr = np.real(np.einsum("aka->k", T_sym[:, diag, :]))
    if k_sign is None:
        j = int(np.argmax(np.abs(tr)))
        if abs(tr[j]) <= 1e-12 * np.max(np.abs(T_sym)):
            return -1, 1.0
        k_sign = diag[j]
    if k_sign < 0:
        return -1, 1.0
    return k_sign, 1.0 if tr[diag.index(k_sign)] >= 0 else -1.0


def normalize_outputs(C_raw, T_raw, k_C=None, k_T=None, k_sign=None):
    """Scale ``C`` and the symmetrized ``T`` to unit max-norm.

    The scale is one reference entry (the largest one unless the indices are
    given), so the map stays smooth for differentiation.  Signs are fixed too:
    the corner is divided by the signed diagonal entry, pinning its leading
    value to +1, and the edge by the sign of a gauge-invariant slice trace.
    Without this the iteration can alternate between ``C`` and ``-C`` (or
    ``T`` and ``-T``) forever.
    """
    T_sym = symmetrize_edge(T_raw)
    if k_C is None:
        k_C = int(np.argmax(np.abs(np.diag(C_raw))))
    if k_T is None:
        k_T = _argmax_abs(T_sym)
    n_C = float(np.real(C_raw[k_C, k_C]))
    n_T = float(abs(T_sym.flat[k_T]))
    if n_C == 0.0 or n_T == 0.0:
        raise NumericError("corner or edge vanished during the CTM step")
    k_sign, sign_T = _edge_sign(T_sym, k_sign)
    cache = StepCache(C_raw, T_raw, T_sym, k_C, k_T, n_C, n_T, k_sign, sign_T)
    return C_raw / n_C, T_sym * (sign_T / n_T), cache


def step_with_isometry(env: Environment, a, P: np.ndarray, k_C=None, k_T=None,
                       M: np.ndarray | None = None, k_sign=None):
    """CTM step with a prescribed isometry instead of the eigensolver.

    ``C_raw = P^dagger M P`` is returned as a full matrix.  Used by the
    backward pass and by finite-difference checks of it.
    """
    dt = _as_double(a)
    if M is None:
        M = enlarged_corner_dense(env, dt)
    C_raw = P.conj().T @ M @ P
    T_raw = project_edge(env, dt, P)
    C_new, T_new, cache = normalize_outputs(C_raw, T_raw, k_C, k_T, k_sign)
    return Environment(C_new, T_new), cache


def _kept_eig(linmap, M, chi_target, multiplet_tol, zero_tol):
    if M is not None:
        s, U = hermitian_eig(M)
    else:
        k = min(linmap.dim_in - 2, chi_target + 16)
        s, U = eigsh(linmap.as_linear_operator(), k=k, which="LM")
        idx = np.lexsort((np.arange(len(s)), -s, -np.abs(s)))
        s, U = s[idx], U[:, idx]
    chi, split = _truncate(s, chi_target, multiplet_tol, zero_tol)
    return s, U[:, :chi], chi, split


def ctm_step(env: Environment, a, chi_target: int, multiplet_tol: float = 1e-8,
             zero_tol: float = 1e-13):
    """One symmetric CTM update.

    Returns ``(env_new, eig)``: the new corner is the kept spectrum divided by
    its signed leading value, the new edge is projected with the kept
    eigenvectors, made Hermitian, divided by its largest magnitude and given
    a gauge-invariant sign (see :func:`normalize_outputs`).
    """
    dt = _as_double(a)
    _check_env(env, dt)
    linmap, M = build_enlarged_corner(env, dt)
    s, P, chi, split = _kept_eig(linmap, M, chi_target, multiplet_tol, zero_tol)
    if split:
        warnings.warn(f"truncation at chi={chi} splits a multiplet (no gap above)",
                      MultipletSplitWarning, stacklevel=2)
    C_raw = np.diag(s[:chi]).astype(P.dtype)
    T_raw = project_edge(env, dt, P)
    C_new, T_new, _ = normalize_outputs(C_raw, T_raw)
    eig = TruncatedEig(P, C_raw, s, chi, split)
    return Environment(C_new, T_new), eig


# --------------------------------------------------------------------------- #
# iteration                                                                    #
# --------------------------------------------------------------------------- #


def initial_environment(a, chi: int | None = None, init: str = "peps",
                        seed: int | None = None) -> Environment:
    """Starting environment.

    ``init="peps"`` closes the open legs of one double tensor with the
    ket-bra identity (corner: top and left legs, edge: left leg).  ``init="random"`` draws a
    random Hermitian corner and edge of bond ``chi`` from ``seed`` (real if
    the PEPS tensor is real).
    """
    dt = _as_double(a)
    D2 = dt.D**2
    real = not np.iscomplexobj(dt.A)
    if init == "peps":
        # boundary vector on each open leg: identity between ket and bra, so
        # every symmetry of the PEPS tensor is kept
        A = dt.A
        C = np.einsum("itrbl,itRBl->bBrR", A, A.conj()).reshape(D2, D2)
        T = np.einsum("itrbl,iTRBl->bBrRtT", A, A.conj()).reshape(D2, D2, D2)
        C = 0.5 * (C + C.conj().T)
        T = symmetrize_edge(T)
    elif init == "random":
        if chi is None:
            raise ValueError("random initialization needs chi")
        rng = np.random.default_rng(seed)

        def draw(shape):
            x = rng.standard_normal(shape)
            return x if real else x + 1j * rng.standard_normal(shape)

        C = draw((chi, chi))
        C = 0.5 * (C + C.conj().T)
        T = symmetrize_edge(draw((chi, D2, chi)))
    else:
        raise ValueError(f"unknown init {init!r}; use 'peps' or 'random'")
    C = C / np.max(np.abs(C))
    T = T / np.max(np.abs(T))
    return Environment(C, T)


def spectrum_distance(s1: np.ndarray | None, s2: np.ndarray) -> float:
    """``max |s1 - s2|`` after zero-padding to a common length."""
    if s1 is None:
        return np.inf
    n = max(len(s1), len(s2))
    x = np.zeros(n)
    y = np.zeros(n)
    x[: len(s1)] = s1
    y[: len(s2)] = s2
    return float(np.max(np.abs(x - y)))


def _is_diagonal(C):
    return np.allclose(C, np.diag(np.diag(C)), rtol=0.0, atol=1e-14)


def converge_ctm(A: np.ndarray, chi_target: int, tol: float = 1e-12, maxiter: int = 2000,
                 seed: int | None = None, init: str = "peps", env0: Environment | None = None,
                 multiplet_tol: float = 1e-8, min_iter: int = 1) -> CTMResult:
    """Iterate :func:`ctm_step` until the corner spectrum stops changing.

    ``A`` must be real: for a complex C4V tensor the enlarged corner is
    complex symmetric instead of Hermitian and the eigenvalue-based update
    does not apply.

    The stopping criterion is the max-norm distance of consecutive normalized
    corner spectra, which is gauge invariant.  ``env0`` warm-starts the
    iteration; otherwise ``init``/``seed`` select the starting point.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    dt = _as_double(A)
    if np.iscomplexobj(dt.A) and np.any(dt.A.imag):
        # reflection symmetry then makes M complex symmetric rather than Hermitian
        raise ValueError("the symmetric CTM needs a real C4V-symmetric PEPS tensor")
    env = env0 if env0 is not None else initial_environment(dt, chi_target, init, seed)
    prev_s = env.spectrum if _is_diagonal(env.C) else None
    history: list[float] = []
    notes: list[str] = []
    env_prev = env
    dist = np.inf
    for it in range(1, maxiter + 1):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MultipletSplitWarning)
            env_new, eig = ctm_step(env, dt, chi_target, multiplet_tol)
        if eig.split_multiplet and not notes:
            notes.append(f"multiplet split at chi={eig.chi_eff} (iteration {it})")
        s = env_new.spectrum
        dist = spectrum_distance(prev_s, s)
        history.append(dist)
        env_prev, env = env, env_new
        prev_s = s
        if dist <= tol and it >= min_iter:
            return CTMResult(env, env_prev, eig, it, dist, history, notes)
    raise NonConvergenceError(
        f"CTM not converged after {maxiter} iterations; spectrum distance {dist:.3e}",
        dist, maxiter)


def renormalization_residual(env: Environment, eig: TruncatedEig | None, a) -> float:
    """Mismatch between ``env`` and the environment one step produces from it.

    Two identities are checked: the kept spectrum of the enlarged corner must
    reproduce the corner, and absorbing a double tensor into the edge and
    projecting must give back the edge.  The edge comparison is made up to the
    gauge freedom (found with the gauge-fixing cascade), so the result does
    not depend on the gauge of ``env``.  Returned value is the larger of the
    two relative max-norm mismatches.
    """
    from .gauge import fix_gauge_cascade  # local import, gauge depends on ctm

    dt = _as_double(a)
    chi = eig.chi_eff if eig is not None else env.chi
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MultipletSplitWarning)
        new, _ = ctm_step(env, dt, chi)
    r_C = spectrum_distance(env.spectrum / np.max(np.abs(env.spectrum)), new.spectrum)
    if new.chi != env.chi:
        return max(r_C, 1.0)
    scale = np.max(np.abs(env.T))
    try:
        g = fix_gauge_cascade(new.T, env.T, new.C, tol=1e-6)
        sig = g.sigma
    except NumericError:
        sig = np.eye(env.chi)
    back = np.einsum("ab,bkc,cd->akd", sig.conj().T, new.T, sig)
    r_T = float(np.max(np.abs(env.T - back)) / scale)
    return max(r_C, r_T)
