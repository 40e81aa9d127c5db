"""Experiments on the peripheral-feature DGP: diagnostic power and the modified-lambda estimator.

``X1`` plays the endogenous learner and ``X2`` its single candidate
instrument, so each experiment uses one ordered pair ``(0, 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SecondPhaseSpec
from .diagnostics import diagnostic_from_predictions
from .dgp import PeripheralDgpConfig, PeripheralSample, generate_peripheral_dgp
from .errors import EstimationError
from .iv import estimate_lambda, estimate_lambda_modified, transform_instrument
from .regression import DesignMatrix, fit_2sls, fit_ols
from .rng import RngStream

PAIR = ((0, 1),)
SPEC = SecondPhaseSpec("linear", "x", ("w",))


def _ols(part: PeripheralSample, covariate):
    return fit_ols(DesignMatrix.build(covariate, part.W, mlv_name="x", control_names=["w"]), part.Y)


def residuals(fit_rows: PeripheralSample, rows: PeripheralSample) -> np.ndarray:
    """Out-of-sample residuals of the error-free regression."""
    coef = _ols(fit_rows, fit_rows.X).point
    return rows.Y - DesignMatrix.build(rows.X, rows.W).matrix @ coef


def _concat(a: PeripheralSample, b: PeripheralSample) -> PeripheralSample:
    return PeripheralSample(**{k: np.concatenate([getattr(a, k), getattr(b, k)]) for k in
                               ("X", "X1", "X2", "W", "Y", "eps", "e1", "e2", "e")})


@dataclass(frozen=True)
class PowerOutcome:
    p_value: float
    corr_before: float  # |Corr(X2 - X, r)| on the diagnostic rows
    corr_after: float  # |Corr(Ztilde - X, r)|
    iv_estimate: float


def power_repetition(sigma: float, rng: RngStream, *, n_total: int = 5000, split=(3000, 1000, 1000),
                     permutations: int = 1000) -> PowerOutcome:
    """One draw of the diagnostic experiment (train / test / diagnostic)."""
    train, test, diag = generate_peripheral_dgp(PeripheralDgpConfig(sigma, n_total, split), rng.child(0))
    r = residuals(_concat(train, test), diag)
    result, raw = diagnostic_from_predictions(test.predictions, test.X, diag.predictions, diag.X, r,
                                              permutations=permutations, rng=rng.child(1), pairs=PAIR)
    lam = estimate_lambda(test.X1, test.X2, test.X)
    z = transform_instrument(lam, diag.X1, diag.X2).values
    beta = fit_2sls(diag.Y, diag.X1, z, diag.W, names=SPEC.names(1))["x"]
    return PowerOutcome(result.p_value, abs(raw.pair_correlations[(0, 1)]),
                        abs(result.pair_correlations[(0, 1)]), beta)


@dataclass(frozen=True)
class ExtendedOutcome:
    standard: float
    extended: float
    lambda_standard: float
    lambda_modified: float


def extended_repetition(sigma: float, rng: RngStream, *, n_total: int = 14000,
                        split=(3000, 1000, 10000)) -> ExtendedOutcome:
    """Standard vs modified-lambda IV estimates of the coefficient on ``X`` (truth 1)."""
    train, test, unlabel = generate_peripheral_dgp(PeripheralDgpConfig(sigma, n_total, split), rng.child(0))
    r_test = residuals(train, test)
    beta_label = _ols(_concat(train, test), np.concatenate([train.X, test.X]))["x"]
    names = SPEC.names(1)
    out = []
    lams = []
    for lam in (estimate_lambda(test.X1, test.X2, test.X),
                estimate_lambda_modified(test.X1, test.X2, test.X, r_test, beta_label)):
        z = transform_instrument(lam, unlabel.X1, unlabel.X2).values
        out.append(fit_2sls(unlabel.Y, unlabel.X1, z, unlabel.W, names=names, estimator="extended")["x"])
        lams.append(lam.lambda_hat)
    return ExtendedOutcome(out[0], out[1], lams[0], lams[1])


def run_power_curve(sigmas, reps: int, seed: int, **kw) -> dict:
    """``sigma -> list[PowerOutcome]``; a failed repetition is recorded as ``None``."""
    root = RngStream(seed)
    out = {}
    for s_idx, sigma in enumerate(sigmas):
        rows = []
        for rep in range(reps):
            try:
                rows.append(power_repetition(sigma, root.child(s_idx, rep), **kw))
            except EstimationError:
                rows.append(None)
        out[float(sigma)] = rows
    return out


def run_extended(sigmas, reps: int, seed: int, **kw) -> dict:
    root = RngStream(seed)
    out = {}
    for s_idx, sigma in enumerate(sigmas):
        rows = []
        for rep in range(reps):
            try:
                rows.append(extended_repetition(sigma, root.child(s_idx, rep), **kw))
            except EstimationError:
                rows.append(None)
        out[float(sigma)] = rows
    return out
