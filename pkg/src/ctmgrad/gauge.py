"""Gauge fixing of CTM edge tensors.

After convergence two consecutive edges are related by a unitary ``sigma``
that commutes with the corner, ``T = sigma^dagger T_hat sigma``.  The
functions here find ``sigma`` so that the fixed point can be made to hold
element-wise.  Three schemes are tried cheapest-first:

* ``phases``: ``sigma`` is a diagonal matrix of phases (needs a
  non-degenerate corner);
* ``transfer``: ``sigma`` is read off the dominant eigenvectors of the mixed
  transfer matrices of ``T``/``T_hat`` with a random MPS;
* ``robust``: null space of ``sigma -> T_hat sigma - sigma T`` restricted to
  the block structure allowed by the corner, then a Levenberg-Marquardt search
  for a unitary combination.

Each returned transform is re-verified independently of the scheme.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .ctm import Environment
from .errors import GaugeFixingError, NumericError, SchemeInapplicableError
from .tensor import einsum, qr_positive

log = logging.getLogger("ctmgrad.gauge")

SCHEMES = ("phases", "transfer", "robust")


@dataclass(frozen=True)
class GaugeTransform:
    sigma: np.ndarray
    scheme: str
    residual: float
    unitarity_residual: float
    commutant_residual: float
    nullspace_dim: int | None = None

    def record(self) -> dict:
        return {
            "scheme": self.scheme,
            "residual": self.residual,
            "unitarity_residual": self.unitarity_residual,
            "commutant_residual": self.commutant_residual,
            "nullspace_dim": self.nullspace_dim,
        }


def apply_gauge(T: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """``sigma^dagger T sigma`` slice by slice."""
    return einsum("ba,bkc,cd->akd", sigma.conj(), T, sigma)


def verify(T_hat, T, C, sigma) -> tuple[float, float, float]:
    """Gauge, unitarity and commutation residuals (max-norm)."""
    chi = sigma.shape[0]
    res = float(np.max(np.abs(T - apply_gauge(T_hat, sigma))))
    unit = float(np.max(np.abs(sigma.conj().T @ sigma - np.eye(chi))))
    comm = 0.0 if C is None else float(np.max(np.abs(sigma @ C - C @ sigma)))
    return res, unit, comm


def _finish(T_hat, T, C, sigma, scheme, tol, nullspace_dim=None) -> GaugeTransform:
    res, unit, comm = verify(T_hat, T, C, sigma)
    g = GaugeTransform(sigma, scheme, res, unit, comm, nullspace_dim)
    if res > tol or unit > max(tol, 1e-10) or comm > max(tol, 1e-10):
        raise GaugeFixingError(
            f"{scheme} scheme: gauge residual {res:.2e}, unitarity {unit:.2e}, "
            f"commutation {comm:.2e} exceed tol {tol:.1e}", res)
    return g


def multiplet_blocks(values: np.ndarray, tol: float = 1e-8) -> list[np.ndarray]:
    """Group indices of (near-)equal values.

    Values are sorted and split wherever consecutive ones differ by more than
    ``tol * max|values|``.  Each block is returned as an index array.
    """
    v = np.asarray(values).real
    scale = max(float(np.max(np.abs(v))), 1e-300)
    order = np.argsort(v, kind="stable")
    blocks, cur = [], [order[0]]
    for i, j in zip(order[:-1], order[1:]):
        if (v[j] - v[i]) / scale < tol:
            cur.append(j)
        else:
            blocks.append(np.sort(np.array(cur)))
            cur = [j]
    blocks.append(np.sort(np.array(cur)))
    return sorted(blocks, key=lambda b: b[0])


def _real_inputs(*xs) -> bool:
    return not any(np.iscomplexobj(x) and np.any(np.imag(x) != 0) for x in xs)


def _fix_global_phase(sigma, real):
    k = np.argmax(np.abs(sigma))
    z = sigma.flat[k]
    sigma = sigma * (abs(z) / z)
    return sigma.real.copy() if real else sigma


# --------------------------------------------------------------------------- #
# phases                                                                       #
# --------------------------------------------------------------------------- #


def fix_gauge_phases(T_hat, T, C, tol: float = 1e-9, multiplet_tol: float = 1e-8,
                     entry_tol: float = 1e-12) -> GaugeTransform:
    """Diagonal phase gauge for a non-degenerate corner.

    ``sigma_00 = 1``; every other phase follows from an entry ``(a, b)`` with
    known ``sigma_a`` via ``sigma_b = sgn(sigma_a conj(T_hat_ab) T_ab)``.  The
    propagation is a breadth-first search that always uses, per pair, the
    slice with the largest ``|T_ab T_hat_ab|``.
    """
    T_hat, T, C = np.asarray(T_hat), np.asarray(T), np.asarray(C)
    chi = T.shape[0]
    if any(len(b) > 1 for b in multiplet_blocks(np.diag(C), multiplet_tol)):
        raise SchemeInapplicableError("corner spectrum is degenerate")
    weight = np.abs(T) * np.abs(T_hat)                     # (a, k, b)
    kbest = np.argmax(weight, axis=1)
    wbest = np.max(weight, axis=1)
    cutoff = entry_tol * max(float(np.max(wbest)), 1e-300)
    ia, ib = np.meshgrid(np.arange(chi), np.arange(chi), indexing="ij")
    Tb = T[ia, kbest, ib]
    Thb = T_hat[ia, kbest, ib]

    phase = np.zeros(chi, dtype=complex)
    phase[0] = 1.0
    known = np.zeros(chi, bool)
    known[0] = True
    queue = deque([0])
    while queue:
        a = queue.popleft()
        for b in np.argsort(-wbest[a]):
            if known[b] or wbest[a, b] <= cutoff:
                continue
            z = phase[a] * np.conj(Thb[a, b]) * Tb[a, b]
            if z == 0:
                continue
            phase[b] = z / abs(z)
            known[b] = True
            queue.append(b)
    if not known.all():
        raise GaugeFixingError(
            f"phase propagation reached {known.sum()} of {chi} indices; T too sparse")
    sigma = np.diag(phase)
    if _real_inputs(T_hat, T):
        sigma = sigma.real.copy()
    return _finish(T_hat, T, C, sigma, "phases", tol)


# --------------------------------------------------------------------------- #
# transfer matrix                                                              #
# --------------------------------------------------------------------------- #


def _mixed_transfer(T, M):
    chi, d, _ = T.shape
    m = M.shape[0]
    E = np.einsum("akb,xky->axby", T, M.conj())
    return E.reshape(chi * m, chi * m)


def _eig(E):
    if E.shape[0] <= 4096:
        return np.linalg.eig(E)
    from scipy.sparse.linalg import eigs

    return eigs(E, k=min(E.shape[0] - 2, 32), which="LM")


def fix_gauge_transfer(T_hat, T, seed: int = 0, tol: float = 1e-9, C=None,
                       bond: int | None = None, unique_tol: float = 1e-8,
                       max_candidates: int = 32) -> GaugeTransform:
    """Gauge from matched eigenvectors of mixed transfer matrices.

    A random MPS tensor ``R`` (bond ``bond >= chi``, drawn from ``seed``) is
    contracted with ``T`` and ``T_hat`` into transfer matrices.  For an
    eigenvalue that is unique in both spectra, the eigenvectors reshaped to
    ``chi x bond`` matrices satisfy ``rho_hat ~ sigma rho``, and positive QR
    of both gives ``sigma = Q_hat Q^dagger``.  Candidates are tried in order
    of decreasing magnitude until one has full rank.
    """
    T_hat, T = np.asarray(T_hat), np.asarray(T)
    chi, d, _ = T.shape
    m = chi if bond is None else int(bond)
    if m < chi:
        raise ValueError("MPS bond must be at least chi")
    real = _real_inputs(T_hat, T)
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((m, d, m))
    if not real:
        R = R + 1j * rng.standard_normal((m, d, m))

    w_hat, v_hat = _eig(_mixed_transfer(T_hat, R))
    w, v = _eig(_mixed_transfer(T, R))
    scale = max(float(np.max(np.abs(w_hat))), 1e-300)
    order = np.argsort(-np.abs(w_hat), kind="stable")
    found_unique = False
    last_err = None
    for idx in order[:max_candidates]:
        lam = w_hat[idx]
        if np.sum(np.abs(w_hat - lam) < unique_tol * scale) != 1:
            continue
        dist = np.abs(w - lam)
        j = int(np.argmin(dist))
        if dist[j] >= unique_tol * scale or np.sum(dist < unique_tol * scale) != 1:
            continue
        found_unique = True
        rho_hat = v_hat[:, idx].reshape(chi, m)
        rho = v[:, j].reshape(chi, m)
        try:
            Q_hat, _ = qr_positive(rho_hat)
            Q, _ = qr_positive(rho)
        except NumericError as exc:
            last_err = exc
            continue
        sigma = _fix_global_phase(Q_hat @ Q.conj().T, real)
        try:
            return _finish(T_hat, T, C, sigma, "transfer", tol)
        except GaugeFixingError as exc:
            last_err = exc
    if not found_unique:
        raise GaugeFixingError("no unique eigenvalue shared by both transfer matrices")
    raise SchemeInapplicableError(f"transfer scheme failed for all candidates: {last_err}")


# --------------------------------------------------------------------------- #
# robust: null space + Levenberg-Marquardt                                     #
# --------------------------------------------------------------------------- #


def _block_basis(blocks, chi):
    pos = []
    for b in blocks:
        for i in b:
            for j in b:
                pos.append((i, j))
    return pos


def gauge_nullspace(T_hat, T, blocks, null_tol: float = 1e-10):
    """Basis of block-diagonal ``sigma`` with ``T_hat^k sigma = sigma T^k``.

    Returns an array of shape (p, chi, chi) whose slices are orthonormal in
    the Frobenius inner product.
    """
    chi = T.shape[0]
    pos = _block_basis(blocks, chi)
    Th = np.moveaxis(T_hat, 1, 0)                           # (k, chi, chi)
    Tk = np.moveaxis(T, 1, 0)
    cols = []
    for i, j in pos:
        # T_hat^k E_ij - E_ij T^k
        col = np.zeros_like(Th, dtype=np.result_type(Th, Tk))
        col[:, :, j] += Th[:, :, i]
        col[:, i, :] -= Tk[:, j, :]
        cols.append(col.ravel())
    N = np.stack(cols, axis=1)
    _, s, Vh = np.linalg.svd(N, full_matrices=True)
    s_full = np.zeros(N.shape[1])
    s_full[: len(s)] = s
    thresh = null_tol * max(float(s_full[0]), 1e-300)
    null = np.nonzero(s_full <= thresh)[0]
    basis = np.zeros((len(null), chi, chi), dtype=Vh.dtype)
    for n, row in enumerate(null):
        vec = Vh[row].conj()
        for (i, j), c in zip(pos, vec):
            basis[n, i, j] = c
    return basis


def _lm_unitary(basis, c0, real, maxiter=200, tol=1e-14):
    """Levenberg-Marquardt on ``||sigma^dagger sigma - 1||_F^2``."""
    p, chi, _ = basis.shape
    eye = np.eye(chi)

    def sigma_of(c):
        return np.tensordot(c, basis, axes=1)

    def residual(c):
        s = sigma_of(c)
        r = s.conj().T @ s - eye
        return np.concatenate([r.real.ravel(), r.imag.ravel()]) if not real else r.real.ravel()

    def jacobian(c):
        s = sigma_of(c)
        cols = []
        for i in range(p):
            Bi = basis[i]
            dre = Bi.conj().T @ s + s.conj().T @ Bi
            cols.append(dre)
        if not real:
            for i in range(p):
                Bi = basis[i]
                cols.append(1j * (s.conj().T @ Bi - Bi.conj().T @ s))
        if real:
            return np.stack([c_.real.ravel() for c_ in cols], axis=1)
        return np.stack([np.concatenate([c_.real.ravel(), c_.imag.ravel()]) for c_ in cols],
                        axis=1)

    def pack(c):
        return c.real.copy() if real else np.concatenate([c.real, c.imag])

    def unpack(x):
        return x.astype(complex) if real else x[:p] + 1j * x[p:]

    x = pack(c0)
    r = residual(unpack(x))
    cost = r @ r
    lam = 1e-3
    for _ in range(maxiter):
        if cost < tol**2:
            break
        J = jacobian(unpack(x))
        g = J.T @ r
        H = J.T @ J
        step_ok = False
        for _inner in range(30):
            try:
                delta = np.linalg.solve(H + lam * np.eye(len(x)), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = x + delta
            r_new = residual(unpack(x_new))
            cost_new = r_new @ r_new
            if cost_new < cost:
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam / 10, 1e-15)
                step_ok = True
                break
            lam *= 10
        if not step_ok:
            break
    c = unpack(x)
    return sigma_of(c), float(np.sqrt(cost))


def fix_gauge_robust(T_hat, T, C, tol: float = 1e-9, multiplet_tol: float = 1e-8,
                     null_tol: float = 1e-10, restarts: int = 10,
                     seed: int = 0) -> GaugeTransform:
    """Most general scheme: null space of the gauge equations plus unitarity.

    ``sigma`` is restricted to be block diagonal on the degenerate subspaces
    of ``C``.  The equations ``T_hat^k sigma - sigma T^k = 0`` are solved
    jointly for all ``k`` (null space by SVD), then coefficients making the
    combination unitary are found by Levenberg-Marquardt, starting from the
    projection of the identity and then from random points.
    """
    T_hat, T, C = np.asarray(T_hat), np.asarray(T), np.asarray(C)
    chi = T.shape[0]
    real = _real_inputs(T_hat, T, C)
    blocks = multiplet_blocks(np.diag(C), multiplet_tol)
    basis = gauge_nullspace(T_hat, T, blocks, null_tol)
    p = len(basis)
    if p == 0:
        raise GaugeFixingError(
            "gauge equations have only the trivial solution: T_hat and T are not "
            "gauge related (is the CTM converged?)")
    if real:
        basis = _realify(basis)
        p = len(basis)
    rng = np.random.default_rng(seed)
    starts = [np.einsum("nij,ij->n", basis.conj(), np.eye(chi))]
    for _ in range(restarts):
        z = rng.standard_normal(p)
        if not real:
            z = z + 1j * rng.standard_normal(p)
        starts.append(z * np.sqrt(chi / p))
    best = np.inf
    for c0 in starts:
        if not np.any(c0):
            continue
        sigma, _ = _lm_unitary(basis, c0.astype(complex), real)
        if real:
            sigma = sigma.real
        try:
            return _finish(T_hat, T, C, sigma, "robust", tol, nullspace_dim=p)
        except GaugeFixingError as exc:
            best = min(best, exc.residual)
    raise GaugeFixingError(
        f"Levenberg-Marquardt found no unitary gauge after {restarts} restarts "
        f"(best gauge residual {best:.2e})", best)


def _realify(basis):
    """Real orthonormal basis spanning the real parts of a (real) null space."""
    p = basis.shape[0]
    stacked = np.concatenate([basis.real.reshape(p, -1), basis.imag.reshape(p, -1)])
    U, s, Vh = np.linalg.svd(stacked, full_matrices=False)
    keep = s > 1e-8 * max(s[0], 1e-300)
    return Vh[keep].reshape(-1, *basis.shape[1:])


# --------------------------------------------------------------------------- #
# cascade                                                                      #
# --------------------------------------------------------------------------- #


def fix_gauge_cascade(T_hat, T, C, tol: float = 1e-9, seed: int = 0,
                      multiplet_tol: float = 1e-8,
                      schemes: tuple[str, ...] = SCHEMES) -> GaugeTransform:
    """Try the schemes in order and return the first verified transform."""
    errors = []
    best = np.inf
    for scheme in schemes:
        try:
            if scheme == "phases":
                g = fix_gauge_phases(T_hat, T, C, tol, multiplet_tol)
            elif scheme == "transfer":
                g = fix_gauge_transfer(T_hat, T, seed, tol, C=C)
            elif scheme == "robust":
                g = fix_gauge_robust(T_hat, T, C, tol, multiplet_tol, seed=seed)
            else:
                raise ValueError(f"unknown gauge scheme {scheme!r}")
        except NumericError as exc:
            errors.append(f"{scheme}: {exc}")
            best = min(best, getattr(exc, "residual", np.inf))
            continue
        log.info(json.dumps(g.record()))
        return g
    raise GaugeFixingError(
        "all gauge-fixing schemes failed; run more CTM iterations. " + "; ".join(errors),
        best)


def fix_environment(env_prev: Environment, env: Environment, C: np.ndarray | None = None,
                    tol: float = 1e-9, seed: int = 0) -> Environment:
    """Rotate ``env`` so its edge equals ``env_prev``'s element-wise.

    ``env`` is the output of the last CTM step and ``env_prev`` its input.
    With ``sigma`` relating them (``T = sigma^dagger T_prev sigma``) the last
    step's isometry becomes ``U sigma^dagger``, which turns the output edge
    into ``sigma T sigma^dagger``.  The transform is stored in ``.gauge``.
    """
    C = env.C if C is None else np.asarray(C)
    g = fix_gauge_cascade(env_prev.T, env.T, C, tol, seed)
    T_fixed = apply_gauge(env.T, g.sigma.conj().T)
    resid = float(np.max(np.abs(T_fixed - env_prev.T)))
    if resid > tol:
        raise GaugeFixingError(
            f"gauge-fixed edge differs from previous by {resid:.2e}", resid)
    # sigma commutes with the corner, so C is left as is
    return Environment(env.C.copy(), T_fixed, gauge=g)
