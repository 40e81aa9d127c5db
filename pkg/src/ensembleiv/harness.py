"""Monte Carlo driver, estimation MSE and report serialization.

Per repetition: fresh data, ``K`` fold ensembles, then every requested
estimator. Fold 1 doubles as the single train/test split, so the Biased,
non-cross-fitted EnsembleIV and regression-calibration estimators use the
model trained on the other ``K - 1`` folds.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .benchmarks import (
    fit_biased,
    fit_unbiased,
    regression_calibration,
    regression_calibration_cf,
    subset_tree_predictions,
)
from .data import PartitionedDataset, SecondPhaseSpec
from .dgp import MainDgpConfig, generate_main_dgp
from .ensemble import EnsembleParams
from .errors import ConfigurationError, DataIOError, EstimationError, ShapeError
from .iv import (
    SelectionConfig,
    average_estimates,
    ensembleiv,
    ensembleiv_crossfit,
    ensembleiv_from_predictions,
    fit_fold_models,
)
from .rng import RngStream

log = logging.getLogger(__name__)

ESTIMATOR_CHOICES = ("biased", "unbiased", "ensembleiv", "ensembleiv_cf", "regcal", "regcal_cf", "subset_trees")


def estimation_mse(estimates, truth) -> float:
    """Squared bias plus variance, summed over coefficients.

    ``estimates`` is ``R x p`` (one row per repetition).
    """
    est = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float).ravel()
    if est.ndim != 2 or est.shape[1] != truth.shape[0]:
        raise ShapeError(f"estimates {est.shape} do not match {truth.shape[0]} coefficients")
    if est.shape[0] < 2:
        raise ConfigurationError("estimation MSE needs at least two repetitions")
    return mse_from_summary(est.mean(axis=0), est.std(axis=0, ddof=1), truth)


def mse_from_summary(means, sds, truth) -> float:
    means, sds, truth = (np.asarray(a, dtype=float).ravel() for a in (means, sds, truth))
    if not means.shape == sds.shape == truth.shape:
        raise ShapeError("means, sds and truth must have equal length")
    return float(np.sum((means - truth) ** 2) + np.sum(sds ** 2))


@dataclass(frozen=True)
class MonteCarloConfig:
    dgp: MainDgpConfig = field(default_factory=MainDgpConfig)
    ensemble: EnsembleParams = field(default_factory=EnsembleParams)
    reps: int = 50
    k: int | None = None  # None: 4 folds for bagging, 3 for boosting
    selections: tuple[SelectionConfig, ...] = (SelectionConfig("pca", 3),)
    estimators: tuple[str, ...] = ("biased", "unbiased", "ensembleiv", "ensembleiv_cf")
    subset_size: int = 50
    subset_draws: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.reps < 2:
            raise ConfigurationError("a Monte Carlo run needs at least two repetitions")
        if self.k is None:
            object.__setattr__(self, "k", 3 if self.ensemble.technique == "boosting" else 4)
        if self.k < 2:
            raise ConfigurationError("need at least two folds")
        unknown = set(self.estimators) - set(ESTIMATOR_CHOICES)
        if unknown:
            raise ConfigurationError(f"unknown estimators: {sorted(unknown)}")
        if "subset_trees" in self.estimators and not (
                self.ensemble.technique == "bagging" and self.subset_size < self.ensemble.n_learners):
            raise ConfigurationError("subset mode needs a bagged forest and subset_size below its size")

    @property
    def task(self) -> str:
        return "classification" if self.dgp.mlv_family == "binary" else "regression"

    @property
    def spec(self) -> SecondPhaseSpec:
        return SecondPhaseSpec(self.dgp.second_phase, "mlv", ("w1", "w2"))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selections"] = [asdict(s) for s in self.selections]
        return d


def _labels(config: MonteCarloConfig) -> list[str]:
    out = []
    for name in config.estimators:
        if name in ("ensembleiv", "ensembleiv_cf", "subset_trees"):
            out += [f"{name}[{s.label}]" for s in config.selections]
        else:
            out.append(name)
    return out


def run_repetition(config: MonteCarloConfig, rep: int) -> dict:
    """All estimators on one fresh dataset. Failed estimators map to ``None``."""
    rng = RngStream(config.seed).child(rep)
    data = generate_main_dgp(config.dgp, rng.child(0), k=config.k)
    pool, unlabel, spec = data.labeled_pool(), data.unlabel, config.spec
    folds = fit_fold_models(pool, config.k, config.task, config.ensemble, rng.child(1))
    first = folds[0]
    split = PartitionedDataset(first.train, first.test, unlabel)
    out: dict = {}

    def attempt(label, fn):
        try:
            est = fn()
            out[label] = {"point": est.point.tolist(), "se": est.se.tolist(),
                          "skipped_fraction": est.diagnostics.get("skipped_fraction", 0.0)}
        except EstimationError as exc:
            log.warning("rep %d: %s failed: %s", rep, label, exc)
            out[label] = None

    for name in config.estimators:
        if name == "biased":
            attempt(name, lambda: fit_biased(first.model, unlabel, spec))
        elif name == "unbiased":
            attempt(name, lambda: fit_unbiased(pool, spec))
        elif name == "regcal":
            attempt(name, lambda: regression_calibration(first.model, first.test, unlabel, spec))
        elif name == "regcal_cf":
            attempt(name, lambda: regression_calibration_cf(folds, unlabel, spec))
        else:
            for sel in config.selections:
                label = f"{name}[{sel.label}]"
                if name == "ensembleiv":
                    attempt(label, lambda: ensembleiv(first.model, split, spec, sel))
                elif name == "ensembleiv_cf":
                    attempt(label, lambda: ensembleiv_crossfit(pool, unlabel, config.k, spec, sel,
                                                               config.ensemble, rng.child(1), fold_fits=folds))
                else:
                    attempt(label, lambda: _subset_crossfit(config, folds, unlabel, spec, sel, rng.child(2)))
    return out


def _subset_crossfit(config, folds, unlabel, spec, sel, rng):
    ests = []
    for ff in folds:
        stream = rng.child(ff.fold)  # same subsets for the test and unlabeled rows
        P_test = subset_tree_predictions(ff.model, config.subset_size, config.subset_draws, ff.test.V, stream)
        P_unl = subset_tree_predictions(ff.model, config.subset_size, config.subset_draws, unlabel.V, stream)
        ests.append(ensembleiv_from_predictions(P_test, ff.test.X, P_unl, unlabel.Y, unlabel.W, spec, sel,
                                                estimator="ensembleiv_cf"))
    return average_estimates(ests, "ensembleiv_cf", skipped_fraction=float(np.mean(
        [e.diagnostics["skipped_fraction"] for e in ests])))


@dataclass(eq=False)
class ExperimentReport:
    names: list
    truth: list
    per_rep: dict  # label -> list over reps of {"point", "se", "skipped_fraction"} or None
    config: dict
    seed: int
    runtime_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def points(self, label) -> np.ndarray:
        rows = [r["point"] for r in self.per_rep[label] if r is not None]
        return np.array(rows, dtype=float).reshape(len(rows), len(self.names))

    def failures(self, label) -> int:
        return sum(r is None for r in self.per_rep[label])

    def summary(self, label) -> dict:
        pts = self.points(label)
        ok = pts.shape[0]
        skipped = [r["skipped_fraction"] for r in self.per_rep[label] if r is not None]
        return {
            "mean": pts.mean(axis=0).tolist() if ok else [float("nan")] * len(self.names),
            "sd": pts.std(axis=0, ddof=1).tolist() if ok > 1 else [float("nan")] * len(self.names),
            "mse": estimation_mse(pts, self.truth) if ok > 1 else float("nan"),
            "reps_ok": ok,
            "failures": self.failures(label),
            "mean_skipped_fraction": float(np.mean(skipped)) if skipped else float("nan"),
        }

    def coefficient(self, label, name="mlv") -> np.ndarray:
        return self.points(label)[:, self.names.index(name)]

    def to_dict(self) -> dict:
        return {
            "names": self.names,
            "truth": self.truth,
            "seed": self.seed,
            "runtime_seconds": self.runtime_seconds,
            "config": self.config,
            "summary": {label: self.summary(label) for label in self.per_rep},
            "per_rep": self.per_rep,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(list(d["names"]), list(d["truth"]), dict(d["per_rep"]), dict(d["config"]), int(d["seed"]),
                   float(d.get("runtime_seconds", 0.0)), dict(d.get("extra", {})))


def run_monte_carlo(config: MonteCarloConfig, *, progress=None, workers: int = 1) -> ExperimentReport:
    """Run ``config.reps`` end-to-end repetitions and collect every estimator.

    With ``workers > 1`` repetitions run in worker processes; every repetition
    owns its random stream, so the report does not depend on ``workers``.
    """
    start = time.perf_counter()
    labels = _labels(config)
    per_rep = {label: [] for label in labels}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = pool.map(run_repetition, [config] * config.reps, range(config.reps))
    else:
        outputs = (run_repetition(config, rep) for rep in range(config.reps))
    for rep, out in enumerate(outputs):
        for label in labels:
            per_rep[label].append(out[label])
        if progress is not None:
            progress(rep + 1, config.reps)
    for label in labels:
        if all(r is None for r in per_rep[label]):
            raise EstimationError(f"estimator {label} failed in every repetition")
    names = ["intercept", "mlv", "w1", "w2"]
    return ExperimentReport(names, list(config.dgp.coefficients), per_rep, config.to_dict(), config.seed,
                            time.perf_counter() - start)


# ---------------------------------------------------------------------------
# emit


def _fmt(v, digits=3):
    return "nan" if v is None or not np.isfinite(v) else f"{v:.{digits}f}"


def report_table(report: ExperimentReport) -> str:
    """Coefficient means with SDs in parentheses, one column per estimator, MSE last."""
    labels = list(report.per_rep)
    summaries = {label: report.summary(label) for label in labels}
    width = max(12, *(len(label) + 2 for label in labels))
    head = f"{'':<12}{'true':>8}" + "".join(f"{label:>{width}}" for label in labels)
    lines = [head, "-" * len(head)]
    for k, name in enumerate(report.names):
        lines.append(f"{name:<12}{report.truth[k]:>8.3f}"
                     + "".join(f"{_fmt(summaries[lb]['mean'][k]):>{width}}" for lb in labels))
        lines.append(f"{'':<12}{'':>8}"
                     + "".join(f"{'(' + _fmt(summaries[lb]['sd'][k]) + ')':>{width}}" for lb in labels))
    lines.append("-" * len(head))
    lines.append(f"{'MSE':<12}{'':>8}" + "".join(f"{_fmt(summaries[lb]['mse']):>{width}}" for lb in labels))
    lines.append(f"{'failures':<12}{'':>8}" + "".join(f"{summaries[lb]['failures']:>{width}}" for lb in labels))
    return "\n".join(lines) + "\n"


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["estimator", "coefficient", "truth", "mean", "sd", "mse", "failures"])
    for label in report.per_rep:
        s = report.summary(label)
        for k, name in enumerate(report.names):
            w.writerow([label, name, report.truth[k], repr(s["mean"][k]), repr(s["sd"][k]), repr(s["mse"]),
                        s["failures"]])
    return buf.getvalue()


def report_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), indent=1, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def emit_report(report: ExperimentReport, fmt: str, out_dir=None, stem: str = "report") -> str:
    """Render ``report`` as ``json``, ``csv`` or ``table``; write it under ``out_dir`` if given."""
    render = {"json": report_json, "csv": report_csv, "table": report_table}
    if fmt not in render:
        raise ConfigurationError(f"unknown format {fmt!r}")
    text = render[fmt](report)
    if out_dir is not None:
        suffix = {"json": "json", "csv": "csv", "table": "txt"}[fmt]
        path = os.path.join(out_dir, f"{stem}.{suffix}")
        try:
            os.makedirs(out_dir, exist_ok=True)
            with open(path, "w") as fh:
                fh.write(text)
        except OSError as exc:
            raise DataIOError(f"{path}: {exc}") from exc
    return text


def load_report(path) -> ExperimentReport:
    try:
        with open(path) as fh:
            return ExperimentReport.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataIOError(f"{path}: {exc}") from exc
