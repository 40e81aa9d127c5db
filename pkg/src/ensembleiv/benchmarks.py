"""Reference estimators: Biased, Unbiased, regression calibration, tree subsets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Samples, SecondPhaseSpec
from .ensemble import EnsembleModel, LearnerPredictionMatrix, predict_aggregate, predict_learners
from .errors import ConfigurationError
from .regression import CoefficientEstimate, DesignMatrix, fit_logistic, fit_ols
from .rng import RngStream


@dataclass(frozen=True)
class BenchmarkConfig:
    estimator: str = "biased"
    subset_size: int = 50
    subset_draws: int = 100

    def __post_init__(self):
        if self.estimator not in ("biased", "unbiased", "regcal", "regcal_cf", "subset_trees"):
            raise ConfigurationError(f"unknown benchmark {self.estimator!r}")
        if self.estimator == "subset_trees" and (self.subset_size < 1 or self.subset_draws < 2):
            raise ConfigurationError("subset mode needs subset_size >= 1 and subset_draws >= 2")


def second_phase_fit(mlv, samples: Samples, spec: SecondPhaseSpec, estimator: str) -> CoefficientEstimate:
    """OLS or logistic fit of ``samples.Y`` on ``mlv`` and the controls."""
    spec.check_outcome(samples.Y)
    design = DesignMatrix.build(mlv, samples.W, intercept=spec.intercept, mlv_name=spec.mlv_name,
                                control_names=list(spec.control_names) or None)
    if spec.family == "logistic":
        fit = fit_logistic(design, samples.Y)
        return CoefficientEstimate(fit.names, fit.point, fit.se, estimator, diagnostics=fit.diagnostics)
    return fit_ols(design, samples.Y, estimator=estimator)


def fit_biased(model: EnsembleModel, unlabel: Samples, spec: SecondPhaseSpec) -> CoefficientEstimate:
    """Second-phase fit with the aggregate ensemble prediction as the covariate."""
    return second_phase_fit(predict_aggregate(model, unlabel.V), unlabel, spec, "biased")


def fit_unbiased(pool: Samples, spec: SecondPhaseSpec) -> CoefficientEstimate:
    """Second-phase fit on the labeled pool using the true covariate."""
    if not pool.has_labels:
        raise ConfigurationError("unbiased regression needs labels")
    return second_phase_fit(pool.X, pool, spec, "unbiased")


def calibration_fit(model: EnsembleModel, test: Samples) -> np.ndarray:
    """Coefficients of ``X ~ 1 + Xhat + W`` on the labeled test rows."""
    xhat = predict_aggregate(model, test.V)
    design = DesignMatrix.build(xhat, test.W)
    return fit_ols(design, test.X).point


def calibrate(model: EnsembleModel, coef, samples: Samples) -> np.ndarray:
    xhat = predict_aggregate(model, samples.V)
    return DesignMatrix.build(xhat, samples.W).matrix @ coef


def regression_calibration(model: EnsembleModel, test: Samples, unlabel: Samples,
                           spec: SecondPhaseSpec) -> CoefficientEstimate:
    """Replace predictions with their calibrated conditional mean, then fit."""
    coef = calibration_fit(model, test)
    fit = second_phase_fit(calibrate(model, coef, unlabel), unlabel, spec, "regcal")
    fit.diagnostics["calibration_coef"] = coef.tolist()
    return fit


def regression_calibration_cf(fold_fits, unlabel: Samples, spec: SecondPhaseSpec) -> CoefficientEstimate:
    """Cross-fitted calibration: one fit per fold model, averaged."""
    from .iv import average_estimates

    fits = [regression_calibration(ff.model, ff.test, unlabel, spec) for ff in fold_fits]
    return average_estimates(fits, "regcal", folds=len(fits), crossfit=True)


def subset_tree_predictions(model: EnsembleModel, subset_size: int, subset_draws: int, V,
                            rng: RngStream) -> LearnerPredictionMatrix:
    """Columns are mean predictions over random tree subsets (no repeats within a subset)."""
    if model.technique != "bagging":
        raise ConfigurationError("subset mode applies to bagged forests")
    M = model.n_learners
    if not 1 <= subset_size <= M:
        raise ConfigurationError(f"subset_size must lie in [1, {M}]")
    if subset_draws < 1:
        raise ConfigurationError("subset_draws must be positive")
    if isinstance(V, Samples):
        V = V.V
    trees = predict_learners(model, V).values
    cols = [trees[:, rng.child(d).generator().choice(M, size=subset_size, replace=False)].mean(axis=1)
            for d in range(subset_draws)]
    return LearnerPredictionMatrix(np.column_stack(cols), "individual", model.task)


def subset_sizes_valid(config: BenchmarkConfig, M: int) -> None:
    if config.estimator == "subset_trees" and config.subset_size >= M:
        raise ConfigurationError("subset_size must be below the ensemble size")

