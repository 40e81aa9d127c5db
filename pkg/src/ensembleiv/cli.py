"""Command-line entry point: ``ensembleiv <command> [options]``.

Commands: ``simulate``, ``estimate``, ``diagnose``, ``benchmark`` and
``acceptance``. Exit codes: 0 success, 1 failed acceptance criterion,
2 configuration error, 3 estimation failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from .benchmarks import fit_biased, fit_unbiased, regression_calibration, regression_calibration_cf
from .data import PartitionedDataset, SecondPhaseSpec, fraction_sizes, ingest_csv, parse_schema, random_split
from .diagnostics import DEFAULT_PERMUTATIONS, fisher_combine, paired_reduction_test, run_diagnostic
from .dgp import MainDgpConfig
from .ensemble import EnsembleParams
from .errors import ConfigurationError, DataIOError, EnsembleIVError
from .harness import ESTIMATOR_CHOICES, emit_report, run_monte_carlo
from .iv import SelectionConfig, ensembleiv, ensembleiv_crossfit, fit_fold_models
from .peripheral import run_extended, run_power_curve
from .regression import bootstrap_estimates
from .rng import RngStream

log = logging.getLogger("ensembleiv")


# ---------------------------------------------------------------------------
# output helpers


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    keys = list(dict.fromkeys(k for row in rows for k in row))
    w = csv.DictWriter(buf, keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _rows_to_table(rows: list[dict]) -> str:
    keys = list(dict.fromkeys(k for row in rows for k in row))
    cells = [[_cell(row.get(k)) for k in keys] for row in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    line = "  ".join(k.rjust(wd) for k, wd in zip(keys, widths))
    out = [line, "-" * len(line)]
    out += ["  ".join(c.rjust(wd) for c, wd in zip(cell, widths)) for cell in cells]
    return "\n".join(out) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def _emit(args, payload: dict, rows: list[dict], stem: str) -> None:
    """Print ``payload`` as JSON, or ``rows`` as CSV/table; mirror it under ``--out``."""
    if args.format == "json":
        text = json.dumps(payload, indent=1, default=_json_default) + "\n"
    elif args.format == "csv":
        text = _rows_to_csv(rows)
    else:
        text = _rows_to_table(rows)
    sys.stdout.write(text)
    if args.out:
        suffix = {"json": "json", "csv": "csv", "table": "txt"}[args.format]
        path = os.path.join(args.out, f"{stem}.{suffix}")
        try:
            os.makedirs(args.out, exist_ok=True)
            with open(path, "w") as fh:
                fh.write(text)
        except OSError as exc:
            raise DataIOError(f"{path}: {exc}") from exc


def _estimate_rows(label: str, est) -> list[dict]:
    return [{"estimator": label, "coefficient": n, "estimate": float(p), "se": float(s),
             "se_source": est.se_source} for n, p, s in zip(est.names, est.point, est.se)]


# ---------------------------------------------------------------------------
# parsing


def _selection(text: str) -> SelectionConfig:
    """``pca3`` / ``top3`` / ``lasso`` or ``method:n``."""
    t = text.strip().lower()
    if t == "lasso":
        return SelectionConfig("lasso")
    for prefix, method in (("pca", "pca"), ("top_n", "top_n"), ("top", "top_n")):
        if t.startswith(prefix):
            rest = t[len(prefix):].lstrip(":")
            try:
                return SelectionConfig(method, int(rest) if rest else 3)
            except ValueError:
                break
    raise ConfigurationError(f"cannot parse selection {text!r} (use pca3, top3, lasso or method:n)")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config file)")
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--out", default=None, help="directory for output files")
    p.add_argument("--format", choices=("json", "csv", "table"), default="table")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes for Monte Carlo repetitions")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--technique", choices=("bagging", "boosting"), default=None)
    p.add_argument("--learners", type=int, default=None, help="ensemble size M")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--folds", type=int, default=None, help="K (default 4 for bagging, 3 for boosting)")
    p.add_argument("--selection", action="append", default=None, help="pca3, top3, lasso or method:n")


def _csv_opts(p: argparse.ArgumentParser, unlabeled: bool = True) -> None:
    p.add_argument("--labeled", default=None, help="CSV with outcome, label, controls and features")
    if unlabeled:
        p.add_argument("--unlabeled", default=None, help="CSV without the label column")
    p.add_argument("--schema", default=None, help="y=<col>,x=<col>,w=<cols>,v=<cols>")
    p.add_argument("--family", choices=("linear", "logistic"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensembleiv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="synthetic Monte Carlo experiments")
    sim.add_argument("--experiment", choices=("main", "peripheral-power", "peripheral-extended"), default="main")
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--mlv-family", choices=("continuous", "binary"), default=None)
    sim.add_argument("--second-phase", choices=("linear", "logistic"), default=None)
    sim.add_argument("--estimators", default=None, help="comma list from " + ",".join(ESTIMATOR_CHOICES))
    sim.add_argument("--sigmas", default=None, help="comma list of peripheral error scales")
    sim.add_argument("--permutations", type=int, default=None)
    _model_opts(sim)
    _common(sim)

    est = sub.add_parser("estimate", help="EnsembleIV on user CSV data")
    _csv_opts(est)
    _model_opts(est)
    est.add_argument("--crossfit", action="store_true")
    est.add_argument("--bootstrap", type=int, default=0, metavar="B", help="partition-wise bootstrap replicates")
    _common(est)

    diag = sub.add_parser("diagnose", help="peripheral-feature diagnostic on user CSV data")
    _csv_opts(diag, unlabeled=False)
    _model_opts(diag)
    diag.add_argument("--fraction", type=float, default=None, help="share of labeled rows held out (default 0.2)")
    diag.add_argument("--permutations", type=int, default=None)
    diag.add_argument("--alpha", type=float, default=None)
    _common(diag)

    bench = sub.add_parser("benchmark", help="compare estimators on user CSV data")
    _csv_opts(bench)
    _model_opts(bench)
    bench.add_argument("--estimators", default="biased,unbiased,regcal,regcal_cf,ensembleiv,ensembleiv_cf")
    _common(bench)

    acc = sub.add_parser("acceptance", help="run the acceptance criteria")
    acc.add_argument("--criteria", default=None, help="comma list of criterion numbers (default all)")
    _common(acc)
    return parser


# ---------------------------------------------------------------------------
# shared setup


def _params(args, cfg) -> EnsembleParams:
    base = dict(cfg.get("ensemble") or {})
    for key, attr in (("technique", "technique"), ("n_learners", "learners"), ("learning_rate", "learning_rate")):
        value = getattr(args, attr, None)
        if value is not None:
            base[key] = value
    return cfgmod._build(EnsembleParams, base, "ensemble")


def _selections(args, cfg) -> tuple[SelectionConfig, ...]:
    if args.selection:
        return tuple(_selection(s) for s in args.selection)
    return cfgmod.selections(cfg)


def _folds(args, params: EnsembleParams) -> int:
    k = args.folds if args.folds is not None else (3 if params.technique == "boosting" else 4)
    if k < 2:
        raise ConfigurationError("--folds must be at least 2")
    return k


def _seed(args, cfg) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _user_data(args, cfg, need_unlabeled=True):
    data_cfg = dict(cfg.get("data") or {})
    labeled = args.labeled or data_cfg.get("labeled")
    schema_text = args.schema or data_cfg.get("schema")
    family = args.family or data_cfg.get("family", "linear")
    if not labeled or not schema_text:
        raise ConfigurationError("--labeled and --schema are required (or a 'data' config section)")
    schema = parse_schema(schema_text)
    if schema.x is None:
        raise ConfigurationError("schema must name the label column (x=...)")
    pool = ingest_csv(labeled, schema)
    unlabel = None
    if need_unlabeled:
        path = getattr(args, "unlabeled", None) or data_cfg.get("unlabeled")
        if not path:
            raise ConfigurationError("--unlabeled is required")
        unl_schema = parse_schema(schema_text)
        unl_schema = type(unl_schema)(y=unl_schema.y, x=None, w=unl_schema.w, v=unl_schema.v)
        unlabel = ingest_csv(path, unl_schema, id_offset=len(pool))
    spec = SecondPhaseSpec(family, schema.x, tuple(schema.w))
    spec.check_outcome(pool.Y)
    task = "classification" if pool.labels_binary else "regression"
    return pool, unlabel, spec, task


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg) -> int:
    seed = _seed(args, cfg)
    if args.experiment == "main":
        mc = cfgmod.monte_carlo_config(cfg, seed)
        updates = {}
        dgp = {}
        if args.mlv_family:
            dgp["mlv_family"] = args.mlv_family
        if args.second_phase:
            dgp["second_phase"] = args.second_phase
        if dgp:
            base = {**(cfg.get("dgp") or {}), **dgp}
            updates["dgp"] = cfgmod._build(MainDgpConfig, base, "dgp")
        if any(getattr(args, a) is not None for a in ("technique", "learners", "learning_rate")):
            updates["ensemble"] = _params(args, cfg)
        if args.reps is not None:
            updates["reps"] = args.reps
        if args.estimators:
            updates["estimators"] = tuple(e.strip() for e in args.estimators.split(","))
        if args.selection:
            updates["selections"] = _selections(args, cfg)
        if args.folds is not None:
            updates["k"] = args.folds
        if updates:
            fields = {f: getattr(mc, f) for f in mc.__dataclass_fields__}
            if "ensemble" in updates and "k" not in updates and "k" not in (cfg.get("harness") or {}):
                fields["k"] = None
            fields.update(updates)
            mc = type(mc)(**fields)

        def progress(rep, total):
            log.info("repetition %d/%d", rep, total)

        report = run_monte_carlo(mc, progress=progress, workers=args.threads or 1)
        text = emit_report(report, args.format, args.out, stem="simulate_main")
        sys.stdout.write(text)
        return 0

    per = dict(cfg.get("peripheral") or {})
    reps = args.reps or per.get("reps", 100)
    if args.sigmas:
        sigmas = [float(s) for s in args.sigmas.split(",")]
    else:
        sigmas = per.get("sigmas") or ([round(0.02 * k, 2) for k in range(1, 21)]
                                       if args.experiment == "peripheral-power" else [0.1, 0.2, 0.3, 0.4])
    rows = []
    if args.experiment == "peripheral-power":
        alpha = per.get("alpha", 0.05)
        permutations = args.permutations or per.get("permutations", 1000)
        curve = run_power_curve(sigmas, reps, seed, permutations=permutations)
        for sigma, outs in curve.items():
            ok = [o for o in outs if o is not None]
            before, after = [o.corr_before for o in ok], [o.corr_after for o in ok]
            rows.append({"sigma": sigma, "reps": len(ok),
                         "rejection_rate": float(np.mean([o.p_value <= alpha for o in ok])),
                         "corr_before": float(np.mean(before)), "corr_after": float(np.mean(after)),
                         "reduction_p": paired_reduction_test(before, after)[1],
                         "iv_mean": float(np.mean([o.iv_estimate for o in ok]))})
    else:
        res = run_extended(sigmas, reps, seed)
        for sigma, outs in res.items():
            ok = [o for o in outs if o is not None]
            rows.append({"sigma": sigma, "reps": len(ok),
                         "standard_mean": float(np.mean([o.standard for o in ok])),
                         "standard_sd": float(np.std([o.standard for o in ok], ddof=1)),
                         "extended_mean": float(np.mean([o.extended for o in ok])),
                         "extended_sd": float(np.std([o.extended for o in ok], ddof=1))})
    _emit(args, {"experiment": args.experiment, "seed": seed, "rows": rows}, rows,
          stem=f"simulate_{args.experiment.replace('-', '_')}")
    return 0


def _fit_user(pool, unlabel, spec, task, params, k, selection, crossfit, rng):
    if crossfit:
        return ensembleiv_crossfit(pool, unlabel, k, spec, selection, params, rng, task=task)
    folds = fit_fold_models(pool, k, task, params, rng)
    first = folds[0]
    return ensembleiv(first.model, PartitionedDataset(first.train, first.test, unlabel), spec, selection)


def cmd_estimate(args, cfg) -> int:
    pool, unlabel, spec, task = _user_data(args, cfg)
    params = _params(args, cfg)
    k = _folds(args, params)
    crossfit = args.crossfit or bool((cfg.get("data") or {}).get("crossfit", False))
    B = args.bootstrap or int((cfg.get("bootstrap") or {}).get("replicates", 0))
    root = RngStream(_seed(args, cfg))
    payload, rows = {}, []
    for s_idx, sel in enumerate(_selections(args, cfg)):
        label = f"{'ensembleiv_cf' if crossfit else 'ensembleiv'}[{sel.label}]"
        rng = root.child(s_idx)
        if B:
            # resampling keeps train/test roles: train + test form the labeled pool
            split = random_split(pool, fraction_sizes(len(pool), [1 - 1 / k, 1 / k]), rng.child(0))
            data = PartitionedDataset(split[0], split[1], unlabel)

            def procedure(d, sel=sel):
                return _fit_user(d.labeled_pool(), d.unlabel, spec, task, params, k, sel, crossfit, rng.child(1))

            est = bootstrap_estimates(procedure, data, B, rng.child(2))
        else:
            est = _fit_user(pool, unlabel, spec, task, params, k, sel, crossfit, rng.child(1))
        payload[label] = est.to_dict()
        rows += _estimate_rows(label, est)
    _emit(args, payload, rows, stem="estimate")
    return 0


def cmd_diagnose(args, cfg) -> int:
    pool, _, spec, task = _user_data(args, cfg, need_unlabeled=False)
    dcfg = dict(cfg.get("diagnostic") or {})
    params = _params(args, cfg)
    k = _folds(args, params)
    fraction = args.fraction if args.fraction is not None else dcfg.get("fraction", 0.2)
    permutations = args.permutations or dcfg.get("permutations", DEFAULT_PERMUTATIONS)
    alpha = args.alpha if args.alpha is not None else dcfg.get("alpha", 0.05)
    if not 0 < fraction < 1:
        raise ConfigurationError("--fraction must lie in (0, 1)")
    root = RngStream(_seed(args, cfg))
    rest, diag = random_split(pool, fraction_sizes(len(pool), [1 - fraction, fraction]), root.child(0))
    folds = fit_fold_models(rest, k, task, params, root.child(1))
    per_fold, p_values = [], []
    for f in folds:
        result, raw = run_diagnostic(f.model, f.train, f.test, diag, spec, permutations=permutations,
                                     rng=root.child(2, f.fold))
        p_values.append(result.p_value)
        per_fold.append({"fold": f.fold, "ts": result.ts_observed, "p_value": result.p_value,
                         "ts_raw": raw.ts_observed, "pairs": len(result.pair_correlations)})
    combined = fisher_combine(p_values, permutations=permutations)
    payload = {"folds": per_fold, "fisher_p_value": combined, "alpha": alpha,
               "rejects": bool(combined <= alpha), "permutations": permutations}
    rows = per_fold + [{"fold": "fisher", "p_value": combined}]
    _emit(args, payload, rows, stem="diagnose")
    return 0


def cmd_benchmark(args, cfg) -> int:
    pool, unlabel, spec, task = _user_data(args, cfg)
    params = _params(args, cfg)
    k = _folds(args, params)
    names = [e.strip() for e in args.estimators.split(",") if e.strip()]
    bad = (set(names) - set(ESTIMATOR_CHOICES)) | ({"subset_trees"} & set(names))
    if bad:
        raise ConfigurationError(f"unsupported estimators: {sorted(bad)}")
    root = RngStream(_seed(args, cfg))
    folds = fit_fold_models(pool, k, task, params, root.child(1))
    first = folds[0]
    split = PartitionedDataset(first.train, first.test, unlabel)
    payload, rows = {}, []

    def record(label, est):
        payload[label] = est.to_dict()
        rows.extend(_estimate_rows(label, est))

    for name in names:
        if name == "biased":
            record(name, fit_biased(first.model, unlabel, spec))
        elif name == "unbiased":
            record(name, fit_unbiased(pool, spec))
        elif name == "regcal":
            record(name, regression_calibration(first.model, first.test, unlabel, spec))
        elif name == "regcal_cf":
            record(name, regression_calibration_cf(folds, unlabel, spec))
        else:
            for sel in _selections(args, cfg):
                if name == "ensembleiv":
                    est = ensembleiv(first.model, split, spec, sel)
                else:
                    est = ensembleiv_crossfit(pool, unlabel, k, spec, sel, params, root.child(1), task=task,
                                              fold_fits=folds)
                record(f"{name}[{sel.label}]", est)
    _emit(args, payload, rows, stem="benchmark")
    return 0


def cmd_acceptance(args, cfg) -> int:
    from .acceptance import CRITERIA, run_all

    numbers = None
    if args.criteria:
        numbers = [int(c) for c in args.criteria.split(",")]
        unknown = set(numbers) - set(CRITERIA)
        if unknown:
            raise ConfigurationError(f"unknown criteria: {sorted(unknown)}")
    results = run_all(numbers, seed=_seed(args, {"seed": 1, **cfg}), echo=print)
    if args.out:
        rows = [{"criterion": r.number, "title": r.title, "passed": r.passed, "summary": r.summary,
                 "seconds": r.seconds, "details": r.details} for r in results]
        path = os.path.join(args.out, "acceptance.json")
        try:
            os.makedirs(args.out, exist_ok=True)
            with open(path, "w") as fh:
                json.dump(rows, fh, indent=1, default=_json_default)
        except OSError as exc:
            raise DataIOError(f"{path}: {exc}") from exc
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "diagnose": cmd_diagnose,
            "benchmark": cmd_benchmark, "acceptance": cmd_acceptance}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigurationError("--threads must be positive")
        cfg = cfgmod.load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except EnsembleIVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
