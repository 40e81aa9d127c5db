"""EnsembleIV against regression calibration and the tree-subset variant on the main DGP."""
import argparse
import sys

from ensembleiv.dgp import MainDgpConfig
from ensembleiv.ensemble import EnsembleParams
from ensembleiv.harness import MonteCarloConfig, emit_report, run_monte_carlo
from ensembleiv.iv import SelectionConfig


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--family", choices=("continuous", "binary"), default="continuous")
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--subset-size", type=int, default=50)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--out", default=None)
    args = p.parse_args(argv)

    config = MonteCarloConfig(
        dgp=MainDgpConfig(args.family),
        ensemble=EnsembleParams("bagging", 100),
        reps=args.reps,
        selections=(SelectionConfig("pca", 3),),
        estimators=("biased", "regcal", "regcal_cf", "ensembleiv", "ensembleiv_cf", "subset_trees"),
        subset_size=args.subset_size,
        seed=args.seed,
    )
    report = run_monte_carlo(config, workers=args.workers,
                             progress=lambda i, n: print(f"rep {i}/{n}", file=sys.stderr, flush=True))
    print(emit_report(report, "table", args.out, stem=f"benchmarks_{args.family}"))


if __name__ == "__main__":
    main()
