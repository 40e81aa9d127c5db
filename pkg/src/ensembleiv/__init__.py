"""EnsembleIV: instrumental-variable correction for regressions on ML-generated covariates."""
from .data import PartitionedDataset, Samples, SecondPhaseSpec, ingest_csv, parse_schema
from .diagnostics import DiagnosticResult, fisher_combine, permutation_test, run_diagnostic
from .dgp import MainDgpConfig, PeripheralDgpConfig, generate_main_dgp, generate_peripheral_dgp
from .ensemble import EnsembleModel, EnsembleParams, predict_aggregate, predict_learners, train_ensemble
from .errors import (
    ConfigurationError,
    DataIOError,
    DegenerateLambdaError,
    EnsembleIVError,
    EstimationError,
)
from .harness import MonteCarloConfig, estimation_mse, run_monte_carlo
from .iv import (
    SelectionConfig,
    ensembleiv,
    ensembleiv_crossfit,
    estimate_lambda,
    estimate_lambda_modified,
    select_instruments,
    transform_instrument,
)
from .regression import CoefficientEstimate, bootstrap_estimates, fit_2sls, fit_2sri, fit_logistic, fit_ols
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "CoefficientEstimate", "ConfigurationError", "DataIOError", "DegenerateLambdaError", "DiagnosticResult",
    "EnsembleIVError", "EnsembleModel", "EnsembleParams", "EstimationError", "MainDgpConfig", "MonteCarloConfig",
    "PartitionedDataset", "PeripheralDgpConfig", "RngStream", "Samples", "SecondPhaseSpec", "SelectionConfig",
    "bootstrap_estimates", "ensembleiv", "ensembleiv_crossfit", "estimate_lambda", "estimate_lambda_modified",
    "estimation_mse", "fisher_combine", "fit_2sls", "fit_2sri", "fit_logistic", "fit_ols", "generate_main_dgp",
    "generate_peripheral_dgp", "ingest_csv", "parse_schema", "permutation_test", "predict_aggregate",
    "predict_learners", "run_diagnostic", "run_monte_carlo", "select_instruments", "train_ensemble",
    "transform_instrument",
]
