"""Peripheral-feature experiments: diagnostic power curve and the modified-lambda estimator."""
import argparse

import numpy as np
from scipy import stats

from ensembleiv.peripheral import run_extended, run_power_curve


def power(args):
    sigmas = [round(0.02 * k, 2) for k in range(1, 21)]
    curve = run_power_curve(sigmas, args.reps, args.seed, permutations=args.permutations)
    print(f"{'sigma':>6} {'reject':>7} {'|corr| before':>14} {'|corr| after':>13} {'paired p':>9}")
    for sigma, rows in curve.items():
        rows = [r for r in rows if r is not None]
        before = np.array([r.corr_before for r in rows])
        after = np.array([r.corr_after for r in rows])
        rate = np.mean([r.p_value <= args.alpha for r in rows])
        p = stats.ttest_rel(before, after, alternative="greater").pvalue
        print(f"{sigma:>6.2f} {rate:>7.2f} {before.mean():>14.4f} {after.mean():>13.4f} {p:>9.2g}")


def extended(args):
    curve = run_extended([0.1, 0.2, 0.3, 0.4], args.reps, args.seed)
    print(f"{'sigma':>6} {'standard':>9} {'(sd)':>7} {'extended':>9} {'(sd)':>7}")
    for sigma, rows in curve.items():
        s = np.array([r.standard for r in rows if r is not None])
        e = np.array([r.extended for r in rows if r is not None])
        print(f"{sigma:>6.2f} {s.mean():>9.3f} {s.std(ddof=1):>7.3f} {e.mean():>9.3f} {e.std(ddof=1):>7.3f}")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("experiment", choices=("power", "extended"))
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--permutations", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=3)
    args = p.parse_args(argv)
    {"power": power, "extended": extended}[args.experiment](args)


if __name__ == "__main__":
    main()
