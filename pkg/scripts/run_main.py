"""Main simulation: Biased, Unbiased and EnsembleIV over repeated end-to-end draws.

    python3 scripts/run_main.py --technique bagging --family continuous --reps 50
    python3 scripts/run_main.py --technique boosting --second-phase logistic --out results/
"""
import argparse
import sys

from ensembleiv.dgp import MainDgpConfig
from ensembleiv.ensemble import EnsembleParams
from ensembleiv.harness import MonteCarloConfig, emit_report, run_monte_carlo
from ensembleiv.iv import SelectionConfig

SELECTIONS = (SelectionConfig("top_n", 3), SelectionConfig("pca", 3), SelectionConfig("lasso"))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--technique", choices=("bagging", "boosting"), default="bagging")
    p.add_argument("--family", choices=("continuous", "binary"), default="continuous")
    p.add_argument("--second-phase", choices=("linear", "logistic"), default="linear")
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--learners", type=int, default=100)
    p.add_argument("--learning-rate", type=float, default=0.3)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default=None)
    args = p.parse_args(argv)

    config = MonteCarloConfig(
        dgp=MainDgpConfig(args.family, args.second_phase),
        ensemble=EnsembleParams(args.technique, args.learners, learning_rate=args.learning_rate),
        reps=args.reps,
        selections=SELECTIONS,
        estimators=("biased", "unbiased", "ensembleiv", "ensembleiv_cf"),
        seed=args.seed,
    )
    report = run_monte_carlo(config, workers=args.workers,
                             progress=lambda i, n: print(f"rep {i}/{n}", file=sys.stderr, flush=True))
    stem = f"main_{args.technique}_{args.family}_{args.second_phase}"
    print(emit_report(report, "table", args.out, stem=stem))
    if args.out:
        emit_report(report, "json", args.out, stem=stem)


if __name__ == "__main__":
    main()
