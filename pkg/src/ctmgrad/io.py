"""Plain-text serialization.

Tensors use the ``TNT1`` format: a header line ``TNT1``, the rank, the shape
(space separated), then one ``re im`` line per entry in row-major order with
17 significant digits, which round-trips float64 exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ctm import Environment
from .errors import ShapeError
from .models import Hamiltonian

MAGIC = "TNT1"


def write_tnt(path: str | Path, X: np.ndarray) -> None:
    X = np.asarray(X)
    flat = X.astype(complex).ravel(order="C")
    lines = [MAGIC, str(X.ndim), " ".join(str(n) for n in X.shape)]
    lines.extend(f"{z.real:.17g} {z.imag:.17g}" for z in flat)
    Path(path).write_text("\n".join(lines) + "\n")


def read_tnt(path: str | Path) -> np.ndarray:
    """Read a TNT1 file; the result is complex128 (callers drop zero imaginary parts)."""
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3 or lines[0].strip() != MAGIC:
        raise ShapeError(f"{path}: not a {MAGIC} file")
    try:
        rank = int(lines[1])
        shape = tuple(int(n) for n in lines[2].split())
    except ValueError as exc:
        raise ShapeError(f"{path}: malformed header") from exc
    if len(shape) != rank:
        raise ShapeError(f"{path}: rank {rank} but shape {shape}")
    size = int(np.prod(shape, dtype=np.int64))
    body = [ln for ln in lines[3:] if ln.strip()]
    if len(body) != size:
        raise ShapeError(f"{path}: expected {size} entries, found {len(body)}")
    data = np.array([[float(v) for v in ln.split()] for ln in body]).reshape(size, 2) \
        if size else np.zeros((0, 2))
    out = np.empty(size, dtype=complex)
    # assign parts separately: re + 1j*im would turn an imaginary -0.0 into +0.0
    out.real, out.imag = data[:, 0], data[:, 1]
    return out.reshape(shape)


def _maybe_real(X: np.ndarray) -> np.ndarray:
    return X.real.copy() if not np.any(X.imag) else X


def write_environment(directory: str | Path, env: Environment, niter: int,
                      prefix: str = "env") -> dict:
    """Write ``<prefix>_C.tnt``, ``<prefix>_T.tnt`` and ``<prefix>.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tnt(d / f"{prefix}_C.tnt", env.C)
    write_tnt(d / f"{prefix}_T.tnt", env.T)
    meta = {"chi_eff": env.chi, "niter": int(niter),
            "spectrum": [float(v) for v in np.real(env.spectrum)]}
    (d / f"{prefix}.json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


def read_environment(directory: str | Path, prefix: str = "env") -> tuple[Environment, dict]:
    d = Path(directory)
    C = _maybe_real(read_tnt(d / f"{prefix}_C.tnt"))
    T = _maybe_real(read_tnt(d / f"{prefix}_T.tnt"))
    meta = json.loads((d / f"{prefix}.json").read_text())
    env = Environment(C, T)
    if env.chi != meta["chi_eff"]:
        raise ShapeError(f"metadata chi_eff={meta['chi_eff']} but corner has size {env.chi}")
    return env, meta


def write_hamiltonian(path: str | Path, H: Hamiltonian) -> None:
    Path(path).write_text(json.dumps(H.to_dict(), indent=2) + "\n")


def read_hamiltonian(path: str | Path) -> Hamiltonian:
    raw = json.loads(Path(path).read_text())
    allowed = {"beta", "j2_over_j1", "j1"}
    extra = set(raw) - allowed
    if extra:
        raise ValueError(f"unknown Hamiltonian keys: {sorted(extra)}")
    return Hamiltonian(float(raw.get("beta", 0.0)), float(raw.get("j2_over_j1", 0.5)),
                       float(raw.get("j1", 1.0)))
