"""Compare the fixed-point gradient against central finite differences.

    python3 scripts/check_gradient.py scripts/configs/grad_random_d2.json
"""

import argparse
import sys
import time

import numpy as np

from ctmgrad.cli import _ansatz_spec, _grad_options, _hamiltonian, _mode, load_config
from ctmgrad.fixed_point import gradient_energy
from ctmgrad.models import build_ansatz, finite_diff_gradient


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    args = p.parse_args(argv)
    cfg = load_config(args.config)
    A = build_ansatz(_ansatz_spec(cfg))
    H = _hamiltonian(cfg)

    t0 = time.perf_counter()
    g = gradient_energy(A, H, cfg.chi, _mode(cfg, cfg.mode, cfg.epsilon), _grad_options(cfg))
    t1 = time.perf_counter()
    g_fd = finite_diff_gradient(A, H, cfg.chi, h_base=cfg.fd_h_base, ctm_tol=cfg.fd_ctm_tol,
                                maxiter=cfg.maxiter)
    t2 = time.perf_counter()

    scale = np.max(np.abs(g_fd))
    err = np.max(np.abs(g.grad - g_fd)) / scale if scale else np.max(np.abs(g.grad))
    print(f"energy          {g.energy:.15f}")
    print(f"series iters    {g.series_iters}")
    print(f"max|g_fd|       {scale:.3e}")
    print(f"relative error  {err:.3e}")
    print(f"time            backward {t1 - t0:.1f}s, finite differences {t2 - t1:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
