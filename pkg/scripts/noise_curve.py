"""Target accuracy against source label-noise rate on the default synthetic shift.

    python scripts/noise_curve.py --etas 0,10,20,30 --seeds 0-4
"""
import argparse

import numpy as np

from prpl.config import ABLATIONS, TrainConfig
from prpl.protocols import synthetic_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--etas", default="0,10,20,30")
    p.add_argument("--seeds", default="0-4")
    p.add_argument("--variant", default="full", choices=sorted(ABLATIONS))
    args = p.parse_args()

    lo, _, hi = args.seeds.partition("-")
    seeds = range(int(lo), int(hi or lo) + 1)
    cfg = TrainConfig(**ABLATIONS[args.variant])
    print(f"{'eta':>5} {'mean':>7} {'std':>6}")
    for eta in (float(e) for e in args.etas.split(",")):
        r = synthetic_benchmark(cfg, seeds=seeds, noise=eta, variant=args.variant)
        print(f"{eta:5g} {100 * r.mean:7.2f} {100 * np.std(r.accuracies):6.2f}")


if __name__ == "__main__":
    main()
