"""Print the structure of a built ansatz tensor.

    python3 scripts/print_ansatz.py [--beta 0.001] [--kind nn_rvb_perturbed]
"""

import argparse

import numpy as np

from ctmgrad.models import AnsatzSpec, build_ansatz
from ctmgrad.tensor import c4v_asymmetry


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--kind", default="nn_rvb_perturbed")
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--D", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    A = build_ansatz(AnsatzSpec(args.kind, beta=args.beta, D=args.D, seed=args.seed))
    nz = np.argwhere(np.abs(A) > 1e-14)
    print(f"shape {A.shape}, {len(nz)} nonzero entries, C4v asymmetry {c4v_asymmetry(A):.1e}")
    for idx in nz:
        print(" ".join(map(str, idx)), f"{A[tuple(idx)]: .6f}")


if __name__ == "__main__":
    main()
