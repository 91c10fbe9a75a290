"""Target accuracy of each training variant on the default synthetic shift.

    python scripts/ablation_table.py --seeds 0-4
    python scripts/ablation_table.py --variants full,source_only --seeds 100-119
"""
import argparse

import numpy as np

from prpl.config import ABLATIONS, TrainConfig
from prpl.data import SyntheticSpec
from prpl.protocols import synthetic_benchmark


def seed_range(text):
    lo, _, hi = text.partition("-")
    return range(int(lo), int(hi or lo) + 1)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variants", default=",".join(ABLATIONS))
    p.add_argument("--seeds", type=seed_range, default=seed_range("0-4"))
    p.add_argument("--maxepoch", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.0, help="source label noise, percent")
    args = p.parse_args()

    spec = SyntheticSpec()
    rows = []
    for name in args.variants.split(","):
        cfg = TrainConfig(maxepoch=args.maxepoch, **ABLATIONS[name])
        rows.append(synthetic_benchmark(cfg, spec, args.seeds, args.noise, name))
    print(f"{'variant':<20} {'mean':>7} {'std':>6} {'sec':>6}  per-seed")
    for r in rows:
        print(f"{r.variant:<20} {100 * r.mean:7.2f} {100 * r.accuracies.std():6.2f} "
              f"{r.seconds:6.1f}  {np.round(100 * r.accuracies, 1)}")


if __name__ == "__main__":
    main()
