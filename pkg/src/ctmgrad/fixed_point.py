"""Reverse-mode differentiation of the CTM fixed point.

At a gauge-fixed fixed point ``x* = f(x*, A)`` the gradient of a cost
``F(x*, A)`` is

    dF/dA = dF/dA|_x + sum_k (df/dA)^T ((df/dx)^T)^k dF/dx,

which is accumulated term by term (or, optionally, via GMRES on
``(1 - (df/dx)^T) y = dF/dx``).  One CTM step is differentiated by hand:
contraction adjoints for the enlarged corner, the edge projection and the
normalizations, and :func:`ctmgrad.adrules.eig_trunc_vjp` for the truncated
eigendecomposition.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .adrules import GradMode, eig_trunc_vjp
from .ctm import (CORNER_EINSUM, EDGE_EINSUM, Environment, MultipletSplitWarning,
                  StepCache, converge_ctm, enlarged_corner_dense,
                  step_with_isometry, symmetrize_edge)
from .errors import CtmGradError, NonConvergenceError, SeriesDivergenceError, StageError
from .gauge import fix_environment
from .models import Hamiltonian, energy_vjp
from .tensor import LinearMap, c4v_symmetrize, einsum_vjp as _vjp, hermitian_eig


def _herm(X):
    return 0.5 * (X + X.conj().T)


def _polar_unitary(X):
    W, _, Vh = np.linalg.svd(X)
    return W @ Vh


def align_isometry(U_kept: np.ndarray, P_ref: np.ndarray) -> np.ndarray:
    """Isometry spanning ``U_kept`` that is closest to ``P_ref``."""
    return U_kept @ _polar_unitary(U_kept.conj().T @ P_ref)


@dataclass
class StepPrimal:
    """Everything the backward pass of one CTM step needs."""

    env: Environment
    A: np.ndarray
    P: np.ndarray
    M: np.ndarray
    cache: StepCache
    env_out: Environment

    @property
    def chi(self) -> int:
        return self.P.shape[1]

    @property
    def fixed_point_residual(self) -> float:
        dC = np.max(np.abs(self.env_out.C - self.env.C))
        dT = np.max(np.abs(self.env_out.T - self.env.T))
        return float(max(dC, dT))


def make_primal(env: Environment, A: np.ndarray, P_ref: np.ndarray) -> StepPrimal:
    """Primal of one step at ``env`` with the isometry aligned to ``P_ref``.

    The kept eigenspace is recomputed at ``env`` and rotated to be as close
    as possible to ``P_ref`` (the gauge-fixed isometry of the last step), so
    the step reproduces ``env`` element-wise at a converged, gauge-fixed
    fixed point.
    """
    M = enlarged_corner_dense(env, A)
    s, U = hermitian_eig(M)
    k = P_ref.shape[1]
    P = align_isometry(U[:, :k], P_ref)
    env_out, cache = step_with_isometry(env, A, P, M=M)
    return StepPrimal(env, np.asarray(A), P, M, cache, env_out)


def vjp_ctm_step(primal: StepPrimal, G_C: np.ndarray, G_T: np.ndarray,
                 mode: GradMode = GradMode(), tol: float = 1e-10, return_info: bool = False):
    """Transpose of the linearized CTM step.

    Maps cotangents ``(G_C, G_T)`` of the step output to cotangents of the
    step input ``(G_C_in, G_T_in)`` (projected onto Hermitian corners and
    Hermitian edge slices) and the explicit contribution ``G_A``.
    """
    env, A, P, cache = primal.env, primal.A, primal.P, primal.cache
    chi_in = env.chi
    D = A.shape[1]
    k = P.shape[1]
    Ac = A.conj()
    T4 = env.T.reshape(chi_in, D, D, chi_in)
    P4 = P.reshape(chi_in, D, D, k)

    G_C = np.asarray(G_C)
    G_T = np.asarray(G_T)

    # normalizations
    nT, nC = cache.n_T, cache.n_C
    G_Tsym = G_T * (cache.sign_T / nT)
    zT = cache.T_sym.flat[cache.k_T]
    G_Tsym = G_Tsym.astype(np.result_type(G_Tsym, complex if np.iscomplexobj(zT) else float))
    G_Tsym.flat[cache.k_T] -= (cache.sign_T * np.real(np.vdot(G_T, cache.T_sym)) / nT**2
                               * (zT / abs(zT)))
    G_Traw = symmetrize_edge(G_Tsym)

    zC = cache.C_raw[cache.k_C, cache.k_C]
    G_Craw = (G_C / nC).astype(np.result_type(G_C, zC, float))
    G_Craw[cache.k_C, cache.k_C] -= np.real(np.vdot(G_C, cache.C_raw)) / nC**2

    # edge projection
    ops = [P4.conj(), T4, A, Ac, P4]
    G_T4o = G_Traw.reshape(k, D, D, k)
    G_P4 = np.conj(_vjp(EDGE_EINSUM, ops, G_T4o, 0)) + _vjp(EDGE_EINSUM, ops, G_T4o, 4)
    G_T4 = _vjp(EDGE_EINSUM, ops, G_T4o, 1)
    G_A = _vjp(EDGE_EINSUM, ops, G_T4o, 2) + np.conj(_vjp(EDGE_EINSUM, ops, G_T4o, 3))
    G_P = G_P4.reshape(P.shape)

    # truncated eigendecomposition
    G_M, info = eig_trunc_vjp(G_Craw, G_P, LinearMap.from_matrix(primal.M), P,
                              cache.C_raw, mode, tol=tol, return_info=True)

    # enlarged corner
    G_M6 = _herm(G_M).reshape(chi_in, D, D, chi_in, D, D)
    ops = [T4, env.C, T4, A, Ac]
    G_T4 = G_T4 + _vjp(CORNER_EINSUM, ops, G_M6, 0) + _vjp(CORNER_EINSUM, ops, G_M6, 2)
    G_Cin = _vjp(CORNER_EINSUM, ops, G_M6, 1)
    G_A = G_A + _vjp(CORNER_EINSUM, ops, G_M6, 3) + np.conj(_vjp(CORNER_EINSUM, ops, G_M6, 4))

    G_Tin = symmetrize_edge(G_T4.reshape(env.T.shape))
    G_Cin = _herm(G_Cin)
    if return_info:
        return G_Cin, G_Tin, G_A, info
    return G_Cin, G_Tin, G_A


@dataclass
class AdjointResult:
    G_A: np.ndarray
    iterations: int
    last_increment: float
    history: list[float] = field(default_factory=list)


def _inf(x):
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


def _tail_factor(history: list[float], window: int) -> float:
    """Ratio of the remaining geometric tail to the last increment.

    The contraction rate is read off the last ``window`` increments; an
    estimate of 1 or more means no stopping is possible yet.
    """
    if len(history) < 2:
        return np.inf
    w = min(window, len(history) - 1)
    if history[-1 - w] == 0.0:
        return np.inf
    r = (history[-1] / history[-1 - w]) ** (1.0 / w)
    if r >= 1.0:
        return np.inf
    return max(1.0, r / (1.0 - r))


def solve_fixed_point_adjoint(primal: StepPrimal, G_C: np.ndarray, G_T: np.ndarray,
                              mode: GradMode = GradMode(), tol: float = 1e-10,
                              maxiter: int = 2000, method: str = "series",
                              divergence_window: int = 20,
                              sylvester_tol: float = 1e-13,
                              project: Callable[[np.ndarray], np.ndarray] | None = None,
                              base: np.ndarray | None = None,
                              rate_window: int = 10) -> AdjointResult:
    """Sum the transposed geometric series of the fixed-point derivative.

    ``y_0 = (G_C, G_T)``; each round applies :func:`vjp_ctm_step` to get
    ``y_{k+1}`` and a contribution to ``G_A``.  Stops once the contribution,
    scaled up by the estimated geometric tail, is below ``tol`` times the
    total (max-norm).  Both are measured after ``project`` (default: none),
    and ``base`` (a term summed outside the series) is included in the total.
    The slowest modes decay at rates close to 1, so without the tail estimate
    the last increment understates the error by ``1/(1 - rate)``.

    ``method="gmres"`` solves the equivalent linear system instead.
    ``sylvester_tol`` is passed to the Sylvester solve inside every step; its
    error accumulates over the series, so it should sit well below the
    accuracy wanted for ``G_A``.
    """
    if method == "gmres":
        return _solve_gmres(primal, G_C, G_T, mode, tol, maxiter, sylvester_tol)
    if method != "series":
        raise ValueError(f"unknown method {method!r}")
    proj = project if project is not None else (lambda x: x)
    yC, yT = np.asarray(G_C), np.asarray(G_T)
    total = np.zeros(primal.A.shape, dtype=np.result_type(primal.A, yC, yT))
    offset = 0.0 if base is None else np.asarray(base)
    history: list[float] = []
    growth = 0
    prev_norm = max(_inf(yC), _inf(yT))
    if prev_norm == 0.0:
        return AdjointResult(total, 1, 0.0, [0.0])
    for it in range(1, maxiter + 1):
        yC, yT, a = vjp_ctm_step(primal, yC, yT, mode, tol=sylvester_tol)
        total = total + a
        inc = _inf(proj(a))
        history.append(inc)
        if inc == 0.0 or inc * _tail_factor(history, rate_window) <= tol * _inf(proj(total + offset)):
            return AdjointResult(total, it, inc, history)
        norm = max(_inf(yC), _inf(yT))
        growth = growth + 1 if norm > prev_norm else 0
        prev_norm = norm
        if growth >= divergence_window:
            raise SeriesDivergenceError(
                f"adjoint series grew for {growth} consecutive iterations "
                f"(|y| = {norm:.3e}); spectral radius >= 1 or unfixed gauge", inc, it)
    raise SeriesDivergenceError(
        f"adjoint series not converged after {maxiter} iterations "
        f"(last increment {history[-1]:.3e})", history[-1], maxiter)


def _solve_gmres(primal, G_C, G_T, mode, tol, maxiter, sylvester_tol):
    shapes = (primal.env.C.shape, primal.env.T.shape)
    nC = int(np.prod(shapes[0]))

    def unpack(v):
        return v[:nC].reshape(shapes[0]), v[nC:].reshape(shapes[1])

    count = [0]

    def matvec(v):
        count[0] += 1
        c, t = unpack(v)
        c2, t2, _ = vjp_ctm_step(primal, c, t, mode, tol=sylvester_tol)
        return np.concatenate([(c - c2).ravel(), (t - t2).ravel()])

    b = np.concatenate([np.ravel(G_C), np.ravel(G_T)]).astype(complex)
    op = LinearOperator((b.size, b.size), matvec=matvec, dtype=complex)
    y, info = gmres(op, b, rtol=tol, atol=0.0, restart=min(50, b.size), maxiter=maxiter)
    if info != 0:
        raise NonConvergenceError(f"GMRES did not converge (info={info})", np.nan, count[0])
    c, t = unpack(y)
    if not (np.iscomplexobj(G_C) or np.iscomplexobj(G_T) or np.iscomplexobj(primal.A)):
        c, t = c.real, t.real
    _, _, G_A = vjp_ctm_step(primal, c, t, mode, tol=sylvester_tol)
    return AdjointResult(G_A, count[0], 0.0, [])


# --------------------------------------------------------------------------- #
# full pipeline                                                                #
# --------------------------------------------------------------------------- #


@dataclass
class GradOptions:
    ctm_tol: float = 1e-14
    ctm_maxiter: int = 5000
    init: str = "peps"
    seed: int | None = None
    gauge_tol: float = 1e-9
    series_tol: float = 1e-10
    series_maxiter: int = 2000
    sylvester_tol: float = 1e-13
    method: str = "series"
    multiplet_tol: float = 1e-8


@dataclass
class GradientResult:
    energy: float
    grad: np.ndarray
    G_A: np.ndarray
    series_iters: int
    ctm_iters: int
    gauge: dict
    fixed_point_residual: float
    timings: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except CtmGradError as exc:
        raise StageError(name, exc) from exc


def gradient_energy(A: np.ndarray, H: Hamiltonian, chi: int, mode: GradMode = GradMode(),
                    opts: GradOptions | None = None, converged=None) -> GradientResult:
    """Energy and its gradient with respect to a real C4V PEPS tensor.

    Pipeline: converge CTM, fix the gauge, differentiate the energy at the
    fixed point, sum the adjoint series.  The returned ``grad`` is
    ``Re(G_A)`` projected onto the C4V-symmetric subspace; ``G_A`` is the raw
    complex cotangent.  ``converged`` may pass an existing
    :class:`ctmgrad.ctm.CTMResult` to skip the first stage.
    """
    opts = opts or GradOptions()
    A = np.asarray(A)
    t0 = time.perf_counter()
    res = converged
    if res is None:
        res = _stage("converge", converge_ctm, A, chi, tol=opts.ctm_tol,
                     maxiter=opts.ctm_maxiter, seed=opts.seed, init=opts.init,
                     multiplet_tol=opts.multiplet_tol)
    t1 = time.perf_counter()
    env_fixed = _stage("gauge-fix", fix_environment, res.env_prev, res.env,
                       tol=opts.gauge_tol, seed=0 if opts.seed is None else opts.seed)
    g = env_fixed.gauge
    P_ref = res.eig.P @ g.sigma.conj().T
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MultipletSplitWarning)
        primal = _stage("gauge-fix", make_primal, env_fixed, A, P_ref)
    t2 = time.perf_counter()
    E, G_C, G_T, G_A0 = _stage("energy", energy_vjp, env_fixed, A, H)
    adj = _stage("fixed-point", solve_fixed_point_adjoint, primal, G_C, G_T, mode,
                 tol=opts.series_tol, maxiter=opts.series_maxiter, method=opts.method,
                 sylvester_tol=opts.sylvester_tol,
                 project=lambda x: c4v_symmetrize(np.real(x)), base=G_A0)
    t3 = time.perf_counter()
    G_A = G_A0 + adj.G_A
    grad = c4v_symmetrize(np.real(G_A))
    return GradientResult(
        energy=E, grad=grad, G_A=G_A, series_iters=adj.iterations, ctm_iters=res.niter,
        gauge=g.record(), fixed_point_residual=primal.fixed_point_residual,
        timings={"ctm": t1 - t0, "gauge": t2 - t1, "backward": t3 - t2},
        warnings=list(res.warnings))
