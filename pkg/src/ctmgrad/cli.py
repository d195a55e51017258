"""Command-line driver: ``ctmgrad converge|grad|sweep --config run.json``.

Exit codes: 0 success, 1 numeric failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .adrules import MODES, BROADENING_FORMS, GradMode
from .ctm import converge_ctm
from .errors import CtmGradError
from .fixed_point import GradOptions, gradient_energy
from .gauge import fix_environment
from .io import write_environment, write_tnt
from .models import AnsatzSpec, Hamiltonian, build_ansatz, energy, finite_diff_gradient

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2

SWEEP_HEADER = ["beta", "epsilon", "mode", "grad_error", "series_iters", "wall_time_s", "note"]
ERROR_NORM = "relative_inf: max|g_i - g_e| / max|g_e|"


class ConfigError(ValueError):
    pass


def _default_eps_grid() -> list[float]:
    return [float(f"1e{k}") for k in range(-16, -3)]


@dataclass
class RunConfig:
    # desk-scale defaults: perturbed RVB (D=3), chi=16
    ansatz: dict = field(default_factory=lambda: {"kind": "nn_rvb_perturbed"})
    hamiltonian: dict = field(default_factory=dict)
    chi: int = 16
    tol: float = 1e-12
    maxiter: int = 5000
    init: str = "peps"
    seed: int = 0
    mode: str = "exact"
    epsilon: float | None = None
    broadening_form: str = "regularized"
    series_tol: float = 1e-10
    series_maxiter: int = 2000
    gauge_tol: float = 1e-9
    method: str = "series"
    fd_h_base: float = 1e-3
    fd_ctm_tol: float = 1e-12
    betas: list = field(default_factory=lambda: [0.0, 1e-7, 1e-3])
    modes: list = field(default_factory=lambda: ["lorentzian_full", "lorentzian", "dp_zero"])
    epsilon_grid: list = field(default_factory=_default_eps_grid)
    workers: int = 1
    out: str = "ctmgrad_out"

    def resolved(self) -> dict:
        return asdict(self)


_ANSATZ_KEYS = {"kind", "beta", "D", "d", "seed", "path"}
_HAM_KEYS = {"beta", "j2_over_j1", "j1"}


def _check_number(name, v, kind=float, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"config key {name!r} must be a number, got {v!r}")
    if kind is int and int(v) != v:
        raise ConfigError(f"config key {name!r} must be an integer, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"config key {name!r} must be positive, got {v!r}")
    return kind(v)


def parse_config(raw: dict) -> RunConfig:
    """Strict parse: unknown keys anywhere raise :class:`ConfigError` naming the key."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = RunConfig(**raw)

    if not isinstance(cfg.ansatz, dict):
        raise ConfigError("config key 'ansatz' must be an object")
    for key in cfg.ansatz:
        if key not in _ANSATZ_KEYS:
            raise ConfigError(f"unknown config key 'ansatz.{key}'")
    if cfg.ansatz.get("kind") not in ("nn_rvb_perturbed", "random_c4v", "from_file"):
        raise ConfigError(f"config key 'ansatz.kind' invalid: {cfg.ansatz.get('kind')!r}")
    if not isinstance(cfg.hamiltonian, dict):
        raise ConfigError("config key 'hamiltonian' must be an object")
    for key in cfg.hamiltonian:
        if key not in _HAM_KEYS:
            raise ConfigError(f"unknown config key 'hamiltonian.{key}'")

    cfg.chi = _check_number("chi", cfg.chi, int, positive=True)
    cfg.maxiter = _check_number("maxiter", cfg.maxiter, int, positive=True)
    cfg.series_maxiter = _check_number("series_maxiter", cfg.series_maxiter, int, positive=True)
    cfg.seed = _check_number("seed", cfg.seed, int)
    cfg.workers = _check_number("workers", cfg.workers, int, positive=True)
    for name in ("tol", "series_tol", "gauge_tol", "fd_h_base", "fd_ctm_tol"):
        setattr(cfg, name, _check_number(name, getattr(cfg, name), positive=True))
    if cfg.epsilon is not None:
        cfg.epsilon = _check_number("epsilon", cfg.epsilon, positive=True)
    if cfg.init not in ("peps", "random"):
        raise ConfigError(f"config key 'init' invalid: {cfg.init!r}")
    if cfg.method not in ("series", "gmres"):
        raise ConfigError(f"config key 'method' invalid: {cfg.method!r}")
    if cfg.broadening_form not in BROADENING_FORMS:
        raise ConfigError(f"config key 'broadening_form' invalid: {cfg.broadening_form!r}")
    if cfg.mode not in MODES:
        raise ConfigError(f"config key 'mode' invalid: {cfg.mode!r}")
    if not isinstance(cfg.modes, list) or any(m not in MODES for m in cfg.modes):
        raise ConfigError(f"config key 'modes' invalid: {cfg.modes!r}")
    for name in ("betas", "epsilon_grid"):
        val = getattr(cfg, name)
        if not isinstance(val, list) or not val:
            raise ConfigError(f"config key {name!r} must be a non-empty list")
        setattr(cfg, name, [_check_number(name, v, positive=(name == "epsilon_grid"))
                            for v in val])
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw)


# --------------------------------------------------------------------------- #
# helpers                                                                      #
# --------------------------------------------------------------------------- #


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _ansatz_spec(cfg: RunConfig, beta: float | None = None) -> AnsatzSpec:
    a = dict(cfg.ansatz)
    if beta is not None:
        a["beta"] = beta
    return AnsatzSpec(**a)


def _hamiltonian(cfg: RunConfig, beta: float | None = None) -> Hamiltonian:
    h = dict(cfg.hamiltonian)
    if beta is not None:
        h["beta"] = beta
    elif "beta" not in h:
        h["beta"] = cfg.ansatz.get("beta", 0.0)
    return Hamiltonian(float(h.get("beta", 0.0)), float(h.get("j2_over_j1", 0.5)),
                       float(h.get("j1", 1.0)))


def _grad_options(cfg: RunConfig) -> GradOptions:
    return GradOptions(ctm_tol=cfg.tol, ctm_maxiter=cfg.maxiter, init=cfg.init,
                       seed=cfg.seed if cfg.init == "random" else None,
                       gauge_tol=cfg.gauge_tol, series_tol=cfg.series_tol,
                       series_maxiter=cfg.series_maxiter, method=cfg.method)


def _mode(cfg: RunConfig, kind: str, epsilon: float | None) -> GradMode:
    return GradMode.parse(kind, epsilon, cfg.broadening_form)


def _out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _attach_run_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger = logging.getLogger("ctmgrad")
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return handler


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def relative_error(g, g_ref) -> float:
    scale = float(np.max(np.abs(g_ref)))
    diff = float(np.max(np.abs(np.asarray(g) - g_ref)))
    if scale == 0:
        return diff
    return diff / scale


# --------------------------------------------------------------------------- #
# commands                                                                     #
# --------------------------------------------------------------------------- #


def cmd_converge(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    A = build_ansatz(_ansatz_spec(cfg))
    res = converge_ctm(A, cfg.chi, tol=cfg.tol, maxiter=cfg.maxiter,
                       seed=cfg.seed if cfg.init == "random" else None, init=cfg.init)
    env = fix_environment(res.env_prev, res.env, tol=cfg.gauge_tol, seed=cfg.seed)
    meta = write_environment(out, env, res.niter)
    report = {
        "command": "converge",
        "niter": res.niter,
        "chi_eff": meta["chi_eff"],
        "spectrum": meta["spectrum"],
        "distance": res.distance,
        "gauge": env.gauge.record(),
        "warnings": res.warnings,
        "energy": energy(env, res.eig, A, _hamiltonian(cfg)),
        "config": cfg.resolved(),
        "version": version_string(),
    }
    _write_json(out / "converge_report.json", report)
    return report


def cmd_grad(cfg: RunConfig, fdcheck: bool = False) -> dict:
    out = _out_dir(cfg)
    A = build_ansatz(_ansatz_spec(cfg))
    H = _hamiltonian(cfg)
    mode = _mode(cfg, cfg.mode, cfg.epsilon)
    t0 = time.perf_counter()
    g = gradient_energy(A, H, cfg.chi, mode, _grad_options(cfg))
    wall = time.perf_counter() - t0
    if not np.all(np.isfinite(g.grad)):
        raise CtmGradError(f"gradient is not finite (mode {mode})")
    write_tnt(out / "grad.tnt", g.grad)
    report = {
        "command": "grad",
        "energy": g.energy,
        "mode": str(mode),
        "series_iters": g.series_iters,
        "ctm_iters": g.ctm_iters,
        "gauge": g.gauge,
        "fixed_point_residual": g.fixed_point_residual,
        "timings": g.timings,
        "wall_time_s": wall,
        "warnings": g.warnings,
        "config": cfg.resolved(),
        "version": version_string(),
    }
    if fdcheck:
        t1 = time.perf_counter()
        g_fd = finite_diff_gradient(A, H, cfg.chi, h_base=cfg.fd_h_base, ctm_tol=cfg.fd_ctm_tol,
                                    maxiter=cfg.maxiter)
        write_tnt(out / "grad_fd.tnt", g_fd)
        report["fd_error"] = relative_error(g.grad, g_fd)
        report["fd_error_norm"] = ERROR_NORM
        report["fd_wall_time_s"] = time.perf_counter() - t1
    _write_json(out / "grad_report.json", report)
    return report


def _sweep_cell(args):
    """One (beta, mode, epsilon) gradient; returns (grad or None, series_iters, wall, note)."""
    cfg, A, H, converged, kind, eps = args
    t0 = time.perf_counter()
    try:
        g = gradient_energy(A, H, cfg.chi, _mode(cfg, kind, eps), _grad_options(cfg),
                            converged=converged)
        if not np.all(np.isfinite(g.grad)):
            return None, g.series_iters, time.perf_counter() - t0, "non-finite gradient"
        return g.grad, g.series_iters, time.perf_counter() - t0, ""
    except (CtmGradError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return None, -1, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def cmd_sweep(cfg: RunConfig) -> list[dict]:
    """Sweep over (beta, mode, epsilon); writes ``sweep.csv`` and ``sweep_meta.json``.

    Per beta the CTM is converged once and the exact gradient ``g_e`` computed
    once; every other cell differentiates the same fixed point.  Modes without
    a broadening parameter are computed once and repeated for every epsilon.
    """
    out = _out_dir(cfg)
    _write_json(out / "sweep_meta.json", {
        "config": cfg.resolved(), "version": version_string(), "grad_error_norm": ERROR_NORM,
        "columns": SWEEP_HEADER,
    })
    records: list[dict] = []
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        try:
            for beta in cfg.betas:
                A = build_ansatz(_ansatz_spec(cfg, beta))
                H = _hamiltonian(cfg, beta)
                opts = _grad_options(cfg)
                t0 = time.perf_counter()
                converged = converge_ctm(A, cfg.chi, tol=opts.ctm_tol, maxiter=opts.ctm_maxiter,
                                         seed=opts.seed, init=opts.init)
                g_e = gradient_energy(A, H, cfg.chi, GradMode("exact"), opts, converged=converged)
                t_exact = time.perf_counter() - t0

                jobs = []
                for kind in cfg.modes:
                    if kind == "exact":
                        continue
                    eps_list = cfg.epsilon_grid if kind.startswith("lorentzian") else [None]
                    for eps in eps_list:
                        jobs.append((kind, eps))
                cells = [(cfg, A, H, converged, kind, eps) for kind, eps in jobs]
                results = list(pool.map(_sweep_cell, cells)) if pool else \
                    [_sweep_cell(c) for c in cells]
                table = dict(zip(jobs, results))

                for kind in cfg.modes:
                    for eps in cfg.epsilon_grid:
                        if kind == "exact":
                            err, iters, wall, note = 0.0, g_e.series_iters, t_exact, ""
                        else:
                            key = (kind, eps if kind.startswith("lorentzian") else None)
                            grad, iters, wall, note = table[key]
                            err = float("nan") if grad is None else relative_error(grad, g_e.grad)
                        rec = {"beta": beta, "epsilon": eps, "mode": kind, "grad_error": err,
                               "series_iters": iters, "wall_time_s": wall, "note": note}
                        records.append(rec)
                        writer.writerow([_fmt(beta), _fmt(eps), kind, _fmt(err), iters,
                                         f"{wall:.3f}", note])
                        fh.flush()
        finally:
            if pool is not None:
                pool.shutdown()
    return records


# --------------------------------------------------------------------------- #
# entry point                                                                  #
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctmgrad", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["converge", "grad", "sweep"])
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, help="overrides config 'seed'")
    p.add_argument("--fdcheck", action="store_true",
                   help="grad: compare against the finite-difference gradient")
    p.add_argument("--mode", choices=MODES,
                   help="grad: backward rule; sweep: restrict to this mode")
    p.add_argument("--epsilon", type=float,
                   help="grad: Lorentzian broadening; sweep: single-point epsilon grid")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.mode is not None:
            cfg.mode = args.mode
            cfg.modes = [args.mode]
        if args.epsilon is not None:
            if not args.epsilon > 0:
                raise ConfigError("--epsilon must be positive")
            cfg.epsilon = args.epsilon
            cfg.epsilon_grid = [args.epsilon]
        _mode(cfg, cfg.mode, cfg.epsilon)
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"ctmgrad: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    handler = _attach_run_log(_out_dir(cfg))
    try:
        if args.command == "converge":
            rep = cmd_converge(cfg)
            print(json.dumps({"niter": rep["niter"], "spectrum": rep["spectrum"],
                              "gauge": rep["gauge"]}, default=_json_default))
        elif args.command == "grad":
            rep = cmd_grad(cfg, fdcheck=args.fdcheck)
            summary = {"energy": rep["energy"], "series_iters": rep["series_iters"]}
            if "fd_error" in rep:
                summary["fd_error"] = rep["fd_error"]
            print(json.dumps(summary))
        else:
            recs = cmd_sweep(cfg)
            print(f"wrote {len(recs)} rows to {Path(cfg.out) / 'sweep.csv'}")
    except CtmGradError as exc:
        print(f"ctmgrad: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        logging.getLogger("ctmgrad").removeHandler(handler)
        handler.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
