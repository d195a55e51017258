"""Dense tensor algebra used throughout the package.

Tensors are plain :class:`numpy.ndarray` objects (complex128 unless the input
is real and stays real).  This module provides

* ``contract`` -- ncon-style network contraction,
* ``einsum_vjp`` -- the reverse-mode rule of an einsum,
* Hermitian eigendecomposition, SVD and positive-diagonal QR with a
  deterministic output convention,
* ``c4v_symmetrize`` for rank-5 PEPS tensors,
* ``LinearMap``, a minimal matrix-free operator wrapper.

Cotangent convention (used package-wide): for a real cost ``L`` and a complex
array ``X`` the cotangent ``G_X`` satisfies ``dL = Re(sum(conj(G_X) * dX))``,
i.e. ``G_X = dL/dRe(X) + 1j * dL/dIm(X)``.  This is twice the conjugate-variable
adjoint of the Wirtinger formulation, so every backward rule is linear in
``G`` and factors of two never matter.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .errors import NumericError, ShapeError

_LETTERS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"


# --------------------------------------------------------------------------- #
# contraction                                                                  #
# --------------------------------------------------------------------------- #

# numpy caps intermediates at the largest operand by default, which silently
# degrades multi-operand einsums to the naive loop
_EINSUM_MEMORY_LIMIT = 2**27


@lru_cache(maxsize=512)
def _einsum_path(subscripts: str, shapes: tuple) -> list:
    dummies = [np.empty(s, dtype=np.int8) for s in shapes]
    path, _ = np.einsum_path(subscripts, *dummies,
                             optimize=("greedy", _EINSUM_MEMORY_LIMIT))
    return path


def einsum(subscripts: str, *operands) -> np.ndarray:
    """``np.einsum`` with a cached greedy pairwise contraction path."""
    operands = [np.asarray(op) for op in operands]
    if len(operands) <= 2:
        return np.einsum(subscripts, *operands)
    path = _einsum_path(subscripts, tuple(op.shape for op in operands))
    return np.einsum(subscripts, *operands, optimize=path)



def _check_network(tensors, network):
    if len(tensors) != len(network):
        raise ShapeError(f"{len(tensors)} tensors but {len(network)} index lists")
    dims: dict[int, int] = {}
    counts: dict[int, int] = {}
    for k, (t, labels) in enumerate(zip(tensors, network)):
        if np.ndim(t) != len(labels):
            raise ShapeError(
                f"tensor {k} has rank {np.ndim(t)} but {len(labels)} labels"
            )
        for dim, lab in zip(np.shape(t), labels):
            if lab == 0:
                raise ShapeError("label 0 is not allowed")
            if lab in dims and dims[lab] != dim:
                raise ShapeError(
                    f"dimension mismatch on label {lab}: {dims[lab]} vs {dim}"
                )
            dims[lab] = dim
            counts[lab] = counts.get(lab, 0) + 1
    for lab, c in counts.items():
        if lab > 0 and c != 2:
            raise ShapeError(f"contracted label {lab} appears {c} times (need 2)")
        if lab < 0 and c != 1:
            raise ShapeError(f"open label {lab} appears {c} times (need 1)")
    open_labels = sorted((lab for lab in counts if lab < 0), reverse=True)
    if open_labels != list(range(-1, -len(open_labels) - 1, -1)):
        raise ShapeError(f"open labels must be -1..-n, got {open_labels}")
    return dims


def contract(tensors: Sequence[np.ndarray], network: Sequence[Sequence[int]],
             order: Sequence[int] | None = None) -> np.ndarray:
    """Contract a tensor network given in ncon convention.

    Positive labels are summed over (each must appear exactly twice, possibly
    on the same tensor for a trace); negative labels ``-1, -2, ...`` are the
    open legs of the result, in that order.

    Without ``order`` the pairwise order is chosen by numpy's greedy path
    search (smallest intermediates first).  With ``order`` the positive labels
    are contracted in the given sequence; all labels shared by the two tensors
    holding the current label are contracted together, as ncon does.
    """
    tensors = [np.asarray(t) for t in tensors]
    network = [list(n) for n in network]
    _check_network(tensors, network)
    if order is None:
        letter = {}
        for labels in network:
            for lab in labels:
                letter.setdefault(lab, _LETTERS[len(letter)])
        subs = ",".join("".join(letter[lab] for lab in labels) for labels in network)
        n_open = sum(1 for labels in network for lab in labels if lab < 0)
        out = "".join(letter[-k] for k in range(1, n_open + 1))
        return einsum(f"{subs}->{out}", *tensors)
    return _contract_in_order(tensors, network, list(order))


def _contract_in_order(tensors, network, order):
    positive = sorted({lab for labels in network for lab in labels if lab > 0})
    if sorted(set(order)) != positive or len(order) != len(positive):
        raise ShapeError("order must list every contracted label exactly once")
    tensors = list(tensors)
    network = [list(n) for n in network]
    done: set[int] = set()
    for lab in order:
        if lab in done:
            continue
        holders = [k for k, labels in enumerate(network) if lab in labels]
        if len(holders) == 1:
            k = holders[0]
            i, j = [p for p, x in enumerate(network[k]) if x == lab]
            tensors[k] = np.trace(tensors[k], axis1=i, axis2=j)
            network[k] = [x for p, x in enumerate(network[k]) if p not in (i, j)]
            done.add(lab)
            continue
        k1, k2 = holders
        shared = [x for x in network[k1] if x in network[k2] and x > 0]
        ax1 = [network[k1].index(x) for x in shared]
        ax2 = [network[k2].index(x) for x in shared]
        new = np.tensordot(tensors[k1], tensors[k2], axes=(ax1, ax2))
        labels = [x for x in network[k1] if x not in shared] + [
            x for x in network[k2] if x not in shared
        ]
        done.update(shared)
        for k in sorted((k1, k2), reverse=True):
            del tensors[k]
            del network[k]
        tensors.append(new)
        network.append(labels)
    result, labels = tensors[0], network[0]
    for t, lab in zip(tensors[1:], network[1:]):
        result = np.multiply.outer(result, t)
        labels = labels + lab
    if not labels:
        return np.asarray(result)
    perm = [labels.index(-k) for k in range(1, len(labels) + 1)]
    return np.transpose(result, perm)


def einsum_vjp(subscripts: str, operands: Sequence[np.ndarray], g_out: np.ndarray,
               wrt: int) -> np.ndarray:
    """Cotangent of operand ``wrt`` of ``np.einsum(subscripts, *operands)``.

    The einsum is holomorphic in each operand, so the cotangent is the einsum
    of ``g_out`` with the conjugated remaining operands.  Indices that appear
    only in the operand itself (summed within it) are broadcast back.
    """
    inputs, out = subscripts.replace(" ", "").split("->")
    subs = inputs.split(",")
    target = subs[wrt]
    if len(set(target)) != len(target):
        raise ShapeError(f"repeated index within operand {wrt}: {target!r}")
    others = [k for k in range(len(subs)) if k != wrt]
    present = set(out).union(*(set(subs[k]) for k in others)) if others else set(out)
    missing = [c for c in target if c not in present]
    terms = [out] + [subs[k] for k in others]
    ops = [g_out] + [np.conj(operands[k]) for k in others]
    for c in missing:
        dim = operands[wrt].shape[target.index(c)]
        terms.append(c)
        ops.append(np.ones(dim))
    return einsum(",".join(terms) + "->" + target, *ops)


# --------------------------------------------------------------------------- #
# decompositions                                                               #
# --------------------------------------------------------------------------- #


def _require_matrix(M, square=False):
    M = np.asarray(M)
    if M.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {M.shape}")
    if square and M.shape[0] != M.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericError("matrix has non-finite entries")
    return M


def hermitian_eig(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition ``M = U diag(s) U^dagger`` of a Hermitian matrix.

    ``M`` is symmetrized first.  Eigenvalues are ordered by descending
    magnitude, ties broken by descending signed value and then by the index
    returned from LAPACK, which makes the ordering deterministic.
    """
    M = _require_matrix(M, square=True)
    M = 0.5 * (M + M.conj().T)
    try:
        s, U = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed: {exc}") from exc
    idx = np.lexsort((np.arange(len(s)), -s, -np.abs(s)))
    return s[idx], U[:, idx]


def svd(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``A = U diag(S) V^dagger`` with ``S`` descending."""
    A = _require_matrix(A)
    try:
        U, S, Vh = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc
    return U, S, Vh.conj().T


def qr_positive(A: np.ndarray, rank_tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """QR decomposition with a real, strictly positive diagonal of ``R``.

    Works for tall (``Q`` isometric, ``R`` square) and wide (``Q`` unitary,
    ``R`` trapezoidal) matrices.  Raises :class:`NumericError` when a diagonal
    entry of ``R`` falls below ``rank_tol * ||A||``; the transfer-matrix gauge
    fixing then has to fall back to another eigenvector or scheme.
    """
    A = _require_matrix(A)
    Q, R = np.linalg.qr(A, mode="reduced")
    d = np.diagonal(R).copy()
    scale = np.linalg.norm(A, 2) if A.size else 0.0
    if d.size == 0 or np.min(np.abs(d)) <= rank_tol * scale:
        raise NumericError(
            "matrix is rank deficient; use another eigenvector or the robust "
            "transfer-matrix/null-space fallback"
        )
    phase = d / np.abs(d)
    Q = Q * phase[None, :]
    R = np.conj(phase)[:, None] * R
    R[np.arange(len(d)), np.arange(len(d))] = np.abs(d)
    return Q, R


# --------------------------------------------------------------------------- #
# C4V symmetry                                                                 #
# --------------------------------------------------------------------------- #

# Virtual legs are ordered (t, r, b, l).  The eight dihedral elements act as
# cyclic shifts of (t, r, b, l) and of its mirror image (t, l, b, r).
C4V_PERMUTATIONS: tuple[tuple[int, ...], ...] = tuple(
    tuple(base[(k + j) % 4] for j in range(4))
    for base in ((1, 2, 3, 4), (1, 4, 3, 2))
    for k in range(4)
)


def c4v_images(A: np.ndarray) -> list[np.ndarray]:
    """The eight images of a rank-5 tensor under the C4V group."""
    return [np.transpose(A, (0,) + p) for p in C4V_PERMUTATIONS]


def c4v_symmetrize(A: np.ndarray) -> np.ndarray:
    """Project a rank-5 tensor ``A[i, t, r, b, l]`` onto the C4V-invariant subspace."""
    A = np.asarray(A)
    if A.ndim != 5:
        raise ShapeError(f"PEPS tensor must have rank 5, got {A.ndim}")
    if len(set(A.shape[1:])) != 1:
        raise ShapeError(f"virtual dimensions must be equal, got {A.shape[1:]}")
    return sum(c4v_images(A)) / 8.0


def c4v_asymmetry(A: np.ndarray) -> float:
    """Largest deviation of ``A`` from any of its C4V images."""
    return max(float(np.max(np.abs(A - B), initial=0.0)) for B in c4v_images(A))


def c4v_orbits(D: int) -> list[list[tuple[int, int, int, int]]]:
    """Orbits of virtual index tuples ``(t, r, b, l)`` under C4V, sorted."""
    seen = set()
    orbits = []
    for idx in np.ndindex(D, D, D, D):
        if idx in seen:
            continue
        orbit = sorted({tuple(idx[p - 1] for p in perm) for perm in C4V_PERMUTATIONS})
        seen.update(orbit)
        orbits.append(orbit)
    return orbits


# --------------------------------------------------------------------------- #
# matrix-free operators                                                        #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LinearMap:
    """A linear operator given only through its action.

    ``apply`` maps arrays of shape ``(dim_in,)`` or ``(dim_in, k)`` to
    ``(dim_out,)`` or ``(dim_out, k)``.
    """

    dim_in: int
    dim_out: int
    apply: Callable[[np.ndarray], np.ndarray]
    dtype: type = complex

    def __call__(self, x):
        return self.apply(x)

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "LinearMap":
        M = np.asarray(M)
        return cls(M.shape[1], M.shape[0], lambda x: M @ x, M.dtype.type)

    def to_dense(self) -> np.ndarray:
        return self.apply(np.eye(self.dim_in, dtype=complex))

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator((self.dim_out, self.dim_in), matvec=self.apply,
                              matmat=self.apply, dtype=complex)

