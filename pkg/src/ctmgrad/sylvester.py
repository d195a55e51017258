"""Matrix-free solver for the projected Sylvester equation

    gamma @ C - M @ (1 - P P^dagger) @ gamma = RHS

that appears in the backward pass of the truncated eigendecomposition (and,
stacked, of the truncated SVD).  ``M`` is only available through its action.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, bicgstab

from .errors import NonConvergenceError, NumericError, ShapeError
from .tensor import LinearMap


class SylvesterSolution(NamedTuple):
    gamma: np.ndarray
    residual: float  # ||gamma C - M Pi gamma - RHS||_F / ||RHS||_F
    iterations: int


def sylvester_operator(applyM: LinearMap | Callable, C: np.ndarray,
                       P: np.ndarray | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """Return ``gamma -> gamma C - M (1 - P P^dagger) gamma`` on matrices."""

    def op(gamma):
        proj = gamma if P is None else gamma - P @ (P.conj().T @ gamma)
        return gamma @ C - applyM(proj)

    return op


def solve_bicgstab(op: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray,
                   precond: Callable[[np.ndarray], np.ndarray] | None,
                   tol: float, maxiter: int, restarts: int = 3) -> SylvesterSolution:
    """Right-preconditioned BiCGSTAB for a linear map acting on arrays.

    Solves ``op(precond(y)) = rhs`` and returns ``gamma = precond(y)``.  The
    relative residual of the original system is recomputed from scratch; if it
    misses ``tol`` the iteration is restarted from the current solution a few
    times before giving up.
    """
    shape = rhs.shape
    n = rhs.size
    apply_k = precond if precond is not None else (lambda y: y)

    def matvec(v):
        return op(apply_k(v.reshape(shape))).ravel()

    A = LinearOperator((n, n), matvec=matvec, dtype=complex)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return SylvesterSolution(np.zeros(shape, dtype=complex), 0.0, 0)
    # solve for unit-norm data: scipy's breakdown tests use absolute thresholds
    b = rhs.ravel().astype(complex) / bnorm

    y = np.zeros(n, dtype=complex)
    total = 0
    residual = np.inf
    for _ in range(restarts + 1):
        count = [0]

        def cb(_xk):
            count[0] += 1

        # a slightly tighter internal tolerance compensates for the drift of
        # the recursively updated residual
        y, _info = bicgstab(A, b, x0=y, rtol=0.1 * tol, atol=0.0,
                            maxiter=maxiter, callback=cb)
        total += count[0]
        gamma = bnorm * apply_k(y.reshape(shape))
        residual = np.linalg.norm(op(gamma) - rhs) / bnorm
        if residual <= tol:
            return SylvesterSolution(gamma, float(residual), total)
    raise NonConvergenceError(
        f"BiCGSTAB did not reach tol={tol:.1e}: final relative residual "
        f"{residual:.3e} after {total} iterations", residual, total)


def solve_sylvester(applyM: LinearMap | Callable, C: np.ndarray, rhs: np.ndarray,
                    P: np.ndarray | None = None, precond: bool | np.ndarray = True,
                    tol: float = 1e-10, maxiter: int | None = None) -> SylvesterSolution:
    """Solve ``gamma C - M (1 - P P^dagger) gamma = rhs`` for ``gamma``.

    Parameters
    ----------
    applyM : LinearMap or callable
        Action of the (n x n) matrix ``M`` on an (n x k) array.
    C : (k, k) array
    rhs : (n, k) array
    P : (n, k) isometry or None
        Projector ``1 - P P^dagger`` is inserted in front of ``gamma`` when
        given.
    precond : bool or (k, k) array
        Right preconditioner.  ``True`` uses ``C^{-1}``, an explicit matrix is
        used as is, ``False`` disables preconditioning.
    tol : float
        Relative Frobenius residual target.
    maxiter : int, optional
        Defaults to ``10 * rhs.size``.
    """
    C = np.asarray(C)
    rhs = np.asarray(rhs)
    if rhs.ndim != 2 or C.shape != (rhs.shape[1], rhs.shape[1]):
        raise ShapeError(f"incompatible shapes C {C.shape}, rhs {rhs.shape}")
    if P is not None and P.shape != rhs.shape:
        raise ShapeError(f"P has shape {P.shape}, expected {rhs.shape}")
    if maxiter is None:
        maxiter = 10 * rhs.size
    if precond is True:
        try:
            cond = np.linalg.cond(C)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not np.isfinite(cond) or cond > 1e15:
            raise NumericError("C is singular; cannot use C^{-1} as preconditioner")
        Kmat = np.linalg.inv(C)
    elif precond is False or precond is None:
        Kmat = None
    else:
        Kmat = np.asarray(precond)
    precond_fn = None if Kmat is None else (lambda y: y @ Kmat)
    op = sylvester_operator(applyM, C, P)
    return solve_bicgstab(op, rhs, precond_fn, tol, maxiter)

