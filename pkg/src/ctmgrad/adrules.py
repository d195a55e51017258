"""Backward rules for truncated Hermitian eigendecompositions and SVDs.

Three families of rules are provided, selected by :class:`GradMode`:

``exact``
    The divergence-free rule.  The kept block ``C = P^dagger M P`` is
    differentiated as a full matrix (its cotangent is used without taking the
    diagonal), so no ``1/(s_i - s_j)`` factor ever appears.  The truncated
    part of the spectrum enters through the Sylvester equation
    ``gamma C - M (1 - P P^dagger) gamma = G_P``.
``lorentzian`` / ``lorentzian_full``
    The conventional rule built from eigenvalue differences with the
    broadened ``F``.  ``lorentzian`` additionally drops the ``M (1 - PP^dagger)``
    coupling (``gamma = G_P C^{-1}``); ``lorentzian_full`` keeps the Sylvester
    solve for the truncated sector.
``dp_zero``
    Isometries are treated as constants; only the kept eigenvalues carry
    gradient.

All rules use the cotangent convention documented in :mod:`ctmgrad.tensor`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .sylvester import solve_bicgstab, solve_sylvester
from .tensor import LinearMap

MODES = ("exact", "lorentzian", "lorentzian_full", "dp_zero")
BROADENING_FORMS = ("regularized", "paper_printed")


@dataclass(frozen=True)
class GradMode:
    """Which backward rule to use for the truncated decompositions."""

    kind: str = "exact"
    epsilon: float = 0.0
    form: str = "regularized"

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown gradient mode {self.kind!r}; choose from {MODES}")
        if self.form not in BROADENING_FORMS:
            raise ValueError(f"unknown broadening form {self.form!r}")
        if self.kind.startswith("lorentzian") and not self.epsilon > 0:
            raise ValueError("lorentzian modes need epsilon > 0")

    @classmethod
    def parse(cls, kind: str, epsilon: float | None = None, form: str = "regularized"):
        if kind.startswith("lorentzian"):
            return cls(kind, 1e-12 if epsilon is None else float(epsilon), form)
        return cls(kind, 0.0, form)

    def __str__(self):
        if self.kind.startswith("lorentzian"):
            return f"{self.kind}({self.epsilon:g})"
        return self.kind


def _herm(X):
    return 0.5 * (X + X.conj().T)


def broadened_F(s: np.ndarray, epsilon: float = 0.0, form: str = "regularized",
                squared: bool = False) -> np.ndarray:
    """Matrix ``F_ij = 1 / x_ij`` with ``x_ij = s_j - s_i`` and ``F_ii = 0``.

    With ``epsilon > 0`` the inverse is broadened to ``x / (x^2 + epsilon)``
    (``form="regularized"``) or to the sign-flipped ``x / (x^2 - epsilon)``,
    which has a pole at ``x^2 = epsilon`` (``form="paper_printed"``).  ``squared=True`` uses
    ``x_ij = s_j^2 - s_i^2`` (singular-value version).  For ``epsilon == 0``
    degenerate pairs give ``inf``; this is reported, not masked.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if form not in BROADENING_FORMS:
        raise ValueError(f"unknown broadening form {form!r}")
    s = np.asarray(s, dtype=float)
    v = s**2 if squared else s
    x = v[None, :] - v[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        if epsilon == 0.0:
            F = 1.0 / x
        elif form == "regularized":
            F = x / (x**2 + epsilon)
        else:
            F = x / (x**2 - epsilon)
    F[np.isnan(F)] = np.inf
    np.fill_diagonal(F, 0.0)
    return F


# --------------------------------------------------------------------------- #
# truncated eigendecomposition                                                 #
# --------------------------------------------------------------------------- #


def eig_trunc_vjp(G_C: np.ndarray | None, G_P: np.ndarray | None, applyM: LinearMap,
                  P: np.ndarray, C: np.ndarray, mode: GradMode = GradMode(),
                  tol: float = 1e-10, return_info: bool = False):
    """Cotangent of the enlarged corner ``M`` from those of ``C`` and ``P``.

    ``P`` (n x k) spans the kept eigenspace and ``C = P^dagger M P`` (k x k,
    diagonal at the primal point).  Returns the Hermitian (n x n) cotangent
    ``G_M``; with ``return_info`` also a dict with the Sylvester residual and
    iteration count (``None`` when no solve was needed).
    """
    n, k = P.shape
    C = np.asarray(C)
    if C.shape != (k, k):
        raise ShapeError(f"C has shape {C.shape}, expected {(k, k)}")
    G_C = np.zeros((k, k), dtype=complex) if G_C is None else np.asarray(G_C)
    G_P = np.zeros((n, k), dtype=complex) if G_P is None else np.asarray(G_P)
    info = {"residual": None, "iterations": None}

    if mode.kind == "dp_zero":
        G_M = P @ np.diag(np.diag(G_C).real) @ P.conj().T
        return (_herm(G_M), info) if return_info else _herm(G_M)

    gamma = None
    if np.any(G_P):
        if mode.kind in ("exact", "lorentzian_full"):
            sol = solve_sylvester(applyM, C, G_P, P=P, precond=True, tol=tol)
            gamma = sol.gamma
            info = {"residual": sol.residual, "iterations": sol.iterations}
        else:
            gamma = G_P @ np.linalg.inv(C)

    if mode.kind == "exact":
        G_M = P @ G_C @ P.conj().T
    else:
        s = np.diag(C).real
        F = broadened_F(s, mode.epsilon, mode.form)
        inner = np.diag(np.diag(G_C).real).astype(complex)
        inner = inner + F * (P.conj().T @ G_P)
        G_M = P @ inner @ P.conj().T
    if gamma is not None:
        proj = gamma - P @ (P.conj().T @ gamma)
        G_M = G_M + proj @ P.conj().T
    G_M = _herm(G_M)
    return (G_M, info) if return_info else G_M


# --------------------------------------------------------------------------- #
# truncated SVD                                                                #
# --------------------------------------------------------------------------- #


def svd_trunc_vjp(G_U: np.ndarray | None, G_S: np.ndarray | None, G_V: np.ndarray | None,
                  A: np.ndarray, U: np.ndarray, S: np.ndarray, V: np.ndarray,
                  mode: GradMode = GradMode(), tol: float = 1e-10,
                  return_info: bool = False):
    """Cotangent of ``A`` for the truncated SVD ``A ~ U diag(S) V^dagger``.

    ``U`` (m x k), ``S`` (k,), ``V`` (n x k) are the kept singular triplets of
    ``A`` (m x n).  The downstream cost must be invariant under the common
    rephasing ``U -> U e^{i phi}``, ``V -> V e^{i phi}``.

    The result is the sum of the classic terms (spectrum, rotations of the
    kept left/right vectors, diagonal phase term attached to ``V``) and a
    truncation term.  In ``exact`` and ``lorentzian_full`` mode the
    truncation term solves the coupled pair

        G_U = gamma S - A (1 - V V^dagger) gamma_t
        G_V = gamma_t S - A^dagger (1 - U U^dagger) gamma

    as one stacked linear system; ``lorentzian`` uses ``gamma = G_U S^{-1}``,
    ``gamma_t = G_V S^{-1}``; ``dp_zero`` keeps only the spectrum and the
    diagonal phase term.
    """
    A = np.asarray(A)
    m, n = A.shape
    k = len(S)
    S = np.asarray(S, dtype=float)
    if U.shape != (m, k) or V.shape != (n, k):
        raise ShapeError(f"inconsistent shapes U {U.shape}, S {S.shape}, V {V.shape}")
    G_U = np.zeros((m, k), dtype=complex) if G_U is None else np.asarray(G_U)
    G_V = np.zeros((n, k), dtype=complex) if G_V is None else np.asarray(G_V)
    G_S = np.zeros(k) if G_S is None else np.asarray(G_S)
    if G_S.ndim == 2:
        G_S = np.diag(G_S)
    G_S = G_S.real
    info = {"residual": None, "iterations": None}

    Uh, Vh = U.conj().T, V.conj().T
    UG = Uh @ G_U
    VG = Vh @ G_V
    G_A = (U * G_S[None, :]) @ Vh

    need_inv = np.any(G_V) or mode.kind != "dp_zero" and (np.any(G_U) or np.any(G_V))
    if need_inv and np.any(S <= 0.0):
        raise NumericError(
            "zero singular value among kept modes; drop exact-zero modes before "
            "differentiating")
    Sinv = 1.0 / S if need_inv else None

    if np.any(G_V):
        diag = np.diag(VG.conj().T - VG)
        G_A = G_A + (U * (Sinv * diag)[None, :]) @ Vh / 2

    if mode.kind == "dp_zero":
        return (G_A, info) if return_info else G_A

    eps = mode.epsilon if mode.kind.startswith("lorentzian") else 0.0
    F = broadened_F(S, eps, mode.form, squared=True)
    JU = F * (UG - UG.conj().T)
    JV = F * (VG - VG.conj().T)
    G_A = G_A + U @ (JU * S[None, :]) @ Vh + U @ (S[:, None] * JV) @ Vh

    if not (np.any(G_U) or np.any(G_V)):
        return (G_A, info) if return_info else G_A

    if mode.kind == "lorentzian":
        gamma, gamma_t = G_U * Sinv[None, :], G_V * Sinv[None, :]
    else:
        gamma, gamma_t, info = _coupled_svd_solve(G_U, G_V, A, U, S, V, tol)
    proj_g = gamma - U @ (Uh @ gamma)
    proj_gt = gamma_t - V @ (Vh @ gamma_t)
    G_A = G_A + proj_g @ Vh + U @ proj_gt.conj().T
    return (G_A, info) if return_info else G_A


def _coupled_svd_solve(G_U, G_V, A, U, S, V, tol):
    m = A.shape[0]
    Ah = A.conj().T
    Uh, Vh = U.conj().T, V.conj().T
    Sm = np.diag(S)

    def op(z):
        g, gt = z[:m], z[m:]
        gt_p = gt - V @ (Vh @ gt)
        g_p = g - U @ (Uh @ g)
        return np.vstack([g @ Sm - A @ gt_p, gt @ Sm - Ah @ g_p])

    rhs = np.vstack([G_U, G_V]).astype(complex)
    Sinv = 1.0 / S
    sol = solve_bicgstab(op, rhs, lambda y: y * Sinv[None, :], tol, 10 * rhs.size)
    info = {"residual": sol.residual, "iterations": sol.iterations}
    return sol.gamma[:m], sol.gamma[m:], info
