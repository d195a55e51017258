"""Run a gradient-accuracy sweep and print the best error per (beta, mode).

    python3 scripts/run_sweep.py scripts/configs/desk_sweep.json [--out DIR]
"""

import argparse
import math
import sys
from collections import defaultdict

from ctmgrad.cli import ConfigError, cmd_sweep, load_config
from ctmgrad.errors import CtmGradError


def summarize(records):
    best = defaultdict(lambda: (math.inf, None))
    for r in records:
        key = (r["beta"], r["mode"])
        err = r["grad_error"]
        if not math.isnan(err) and err < best[key][0]:
            best[key] = (err, r["epsilon"])
    lines = [f"{'beta':>10} {'mode':>16} {'best_error':>12} {'at_epsilon':>11}"]
    for (beta, mode), (err, eps) in sorted(best.items()):
        at = "-" if mode in ("exact", "dp_zero") else f"{eps:.0e}"
        lines.append(f"{beta:>10.3g} {mode:>16} {err:>12.3e} {at:>11}")
    return "\n".join(lines)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--out")
    args = p.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        cfg.out = args.out
    try:
        records = cmd_sweep(cfg)
    except CtmGradError as exc:
        print(f"sweep failed: {exc}", file=sys.stderr)
        return 1
    print(summarize(records))
    return 0


if __name__ == "__main__":
    sys.exit(main())
