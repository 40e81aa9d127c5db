"""Instrument construction from ensemble learners and the averaged IV estimator.

For an endogenous learner ``i`` and candidate learner ``j`` the ratio

    lambda = Cov(Z, e) / Cov(Xhat, e) * sd(Xhat) / sd(Z)

(``Xhat`` = learner i, ``Z`` = learner j, ``e = Xhat - X``) is estimated on
labeled test rows, and the candidate becomes

    Ztilde = sd(Xhat) * Z - lambda * sd(Z) * Xhat

on the unlabeled rows, with both standard deviations taken from the test rows.
On the sample used to estimate lambda, ``Ztilde`` is exactly uncorrelated with
``e``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import PartitionedDataset, Samples, SecondPhaseSpec, partition_labeled
from .ensemble import EnsembleModel, EnsembleParams, predict_learners, train_ensemble
from .errors import ConfigurationError, DegenerateLambdaError, EstimationError, ShapeError
from .lasso import lasso_select
from .regression import CoefficientEstimate, fit_2sls, fit_2sri
from .rng import RngStream

DEGENERATE_TOL = 1e-12
PCA_RANK_TOL = 1e-10


class SelectionWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# lambda and the transformation


@dataclass(frozen=True)
class LambdaEstimate:
    lambda_hat: float
    cov_z_e: float
    cov_xhat_e: float
    sigma_xhat: float
    sigma_z: float
    source: str = "standard"
    pair: tuple[int, int] = (0, 1)


@dataclass(frozen=True, eq=False)
class TransformedInstrument:
    values: np.ndarray
    lam: LambdaEstimate

    @property
    def endogenous_index(self) -> int:
        return self.lam.pair[0]

    @property
    def instrument_index(self) -> int:
        return self.lam.pair[1]


def _cov(a, b) -> float:
    return float(np.dot(a - a.mean(), b - b.mean()) / (a.shape[0] - 1))


def _check_vectors(*vectors):
    vectors = [np.asarray(v, dtype=float).ravel() for v in vectors]
    n = vectors[0].shape[0]
    if any(v.shape[0] != n for v in vectors):
        raise ShapeError("input vectors differ in length")
    if n < 3:
        raise ShapeError("need at least three rows to estimate lambda")
    return vectors


def _finish_lambda(num, den, sx, sz, spread, source, pair) -> LambdaEstimate:
    if sx <= 0 or sz <= 0:
        raise DegenerateLambdaError(f"pair {pair}: zero-variance prediction")
    if spread <= 1e-14 * sx:
        # no measurement error on these rows: any candidate is already excluded
        return LambdaEstimate(0.0, num, den, sx, sz, source, pair)
    if abs(den) < DEGENERATE_TOL * sx * spread:
        raise DegenerateLambdaError(f"pair {pair}: Cov(Xhat, error) is numerically zero")
    return LambdaEstimate(num / den * sx / sz, num, den, sx, sz, source, pair)


def estimate_lambda(pred_i, pred_j, x, pair=(0, 1)) -> LambdaEstimate:
    """Standard lambda from labeled rows (sample moments, n-1 denominators)."""
    xhat, z, x = _check_vectors(pred_i, pred_j, x)
    e = xhat - x
    return _finish_lambda(_cov(z, e), _cov(xhat, e), float(np.std(xhat, ddof=1)),
                          float(np.std(z, ddof=1)), float(np.std(e, ddof=1)), "standard", tuple(pair))


def estimate_lambda_modified(pred_i, pred_j, x, residuals, beta_hat: float, pair=(0, 1)) -> LambdaEstimate:
    """Lambda that also accounts for correlation between predictions and the outcome error.

    ``residuals`` proxy the outcome error on the labeled rows (an error-free
    regression fit elsewhere and applied here); ``beta_hat`` is that
    regression's coefficient on the true covariate.
    """
    xhat, z, x, r = _check_vectors(pred_i, pred_j, x, residuals)
    e = xhat - x
    num = _cov(z, r) - beta_hat * _cov(z, e)
    den = _cov(xhat, r) - beta_hat * _cov(xhat, e)
    return _finish_lambda(num, den, float(np.std(xhat, ddof=1)), float(np.std(z, ddof=1)),
                          float(np.std(r - beta_hat * e, ddof=1)), "modified", tuple(pair))


def transform_instrument(lam: LambdaEstimate, pred_i, pred_j) -> TransformedInstrument:
    xhat = np.asarray(pred_i, dtype=float).ravel()
    z = np.asarray(pred_j, dtype=float).ravel()
    if xhat.shape != z.shape:
        raise ShapeError("endogenous and candidate vectors differ in length")
    return TransformedInstrument(lam.sigma_xhat * z - lam.lambda_hat * lam.sigma_z * xhat, lam)


@dataclass(frozen=True, eq=False)
class LambdaMatrix:
    """All ordered pairs at once: ``lam[i, j]`` for endogenous ``i``, candidate ``j``."""

    lam: np.ndarray
    sigma: np.ndarray
    valid: np.ndarray  # valid[i, j]; the diagonal is always False

    def row_ok(self, i) -> bool:
        return bool(self.valid[i].any())


def pairwise_lambda(P, x, *, residuals=None, beta_hat=None) -> LambdaMatrix:
    """Vectorised lambda for every ordered learner pair on labeled rows.

    Matches :func:`estimate_lambda` (or :func:`estimate_lambda_modified` when
    ``residuals`` and ``beta_hat`` are given) pair by pair; degenerate pairs
    are marked invalid instead of raising.
    """
    P = np.asarray(P, dtype=float)
    x = np.asarray(x, dtype=float).ravel()
    n, M = P.shape
    if x.shape[0] != n:
        raise ShapeError("labels and predictions differ in length")
    Pc = P - P.mean(axis=0)
    E = P - x[:, None]
    Ec = E - E.mean(axis=0)
    cov_pe = Pc.T @ Ec / (n - 1)  # cov_pe[j, i] = Cov(P_j, e_i)
    sigma = np.sqrt(np.sum(Pc * Pc, axis=0) / (n - 1))
    if residuals is None:
        num = cov_pe.T  # num[i, j] = Cov(P_j, e_i)
        den = np.diag(cov_pe).copy()
        spread = np.sqrt(np.sum(Ec * Ec, axis=0) / (n - 1))
    else:
        r = np.asarray(residuals, dtype=float).ravel()
        cov_pr = Pc.T @ (r - r.mean()) / (n - 1)
        num = cov_pr[None, :] - beta_hat * cov_pe.T
        den = cov_pr - beta_hat * np.diag(cov_pe)
        U = r[:, None] - beta_hat * E
        Uc = U - U.mean(axis=0)
        spread = np.sqrt(np.sum(Uc * Uc, axis=0) / (n - 1))
    no_error = spread <= 1e-14 * sigma
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = num / den[:, None] * sigma[:, None] / sigma[None, :]
    lam[no_error, :] = 0.0
    valid = (sigma[:, None] > 0) & (sigma[None, :] > 0)
    valid &= (no_error | (np.abs(den) >= DEGENERATE_TOL * sigma * spread))[:, None]
    np.fill_diagonal(valid, False)
    lam = np.where(valid, lam, np.nan)
    return LambdaMatrix(lam, sigma, valid)


def transformed_candidates(lm: LambdaMatrix, P_unlabel, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Transformed instruments for endogenous learner ``i``: ``(keys j, n x k matrix)``."""
    keys = np.flatnonzero(lm.valid[i])
    coef = lm.lam[i, keys] * lm.sigma[keys]
    Z = lm.sigma[i] * P_unlabel[:, keys] - P_unlabel[:, i:i + 1] * coef[None, :]
    return keys, Z


def transform_weights(lm: LambdaMatrix, i: int) -> tuple[np.ndarray, np.ndarray]:
    """``(keys, A)`` with ``P @ A`` equal to the transformed candidates of learner ``i``."""
    keys = np.flatnonzero(lm.valid[i])
    A = np.zeros((lm.lam.shape[0], keys.size))
    A[keys, np.arange(keys.size)] = lm.sigma[i]
    A[i, :] = -lm.lam[i, keys] * lm.sigma[keys]
    return keys, A


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class SelectionConfig:
    method: str = "pca"
    n: int = 3
    lasso_alpha: float = 0.05
    lasso_penalty_constant: float = 1.1
    lasso_penalty: float | None = None  # fixed delta, bypassing the plug-in rule

    def __post_init__(self):
        if self.method not in ("top_n", "pca", "lasso"):
            raise ConfigurationError(f"unknown selection method {self.method!r}")
        if self.method != "lasso" and self.n < 1:
            raise ConfigurationError("selection count n must be >= 1")
        if self.lasso_penalty is not None and self.lasso_penalty < 0:
            raise ConfigurationError("LASSO penalty must be non-negative")

    @property
    def label(self) -> str:
        return {"top_n": f"top{self.n}", "pca": f"pca{self.n}", "lasso": "lasso"}[self.method]


@dataclass(frozen=True, eq=False)
class Selection:
    columns: np.ndarray
    keys: tuple  # chosen candidate keys; for PCA, the component numbers
    method: str
    notes: tuple[str, ...] = field(default_factory=tuple)


def _abs_corr(y, Z):
    yc = y - y.mean()
    Zc = Z - Z.mean(axis=0)
    denom = np.sqrt((yc @ yc) * np.sum(Zc * Zc, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs(yc @ Zc) / denom
    return np.nan_to_num(r, nan=0.0)


def select_instruments(endogenous, candidates, config: SelectionConfig, keys=None) -> Selection:
    """Choose instrument columns among transformed candidates.

    ``candidates`` is an ``n x k`` matrix (or a list of
    :class:`TransformedInstrument`, whose keys default to their learner
    index). Candidates are ordered by key first, so the result does not depend
    on input order; ties in correlation go to the smallest key.
    """
    if isinstance(candidates, (list, tuple)) and candidates and isinstance(candidates[0], TransformedInstrument):
        if keys is None:
            keys = [c.instrument_index for c in candidates]
        candidates = np.column_stack([c.values for c in candidates])
    Z = np.asarray(candidates, dtype=float)
    y = np.asarray(endogenous, dtype=float).ravel()
    if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
        raise ShapeError("candidate matrix does not match the endogenous column")
    k = Z.shape[1]
    if k < 1:
        raise ConfigurationError("no candidate instruments")
    keys = np.arange(k) if keys is None else np.asarray(keys)
    order = np.argsort(keys, kind="stable")
    Z, keys = Z[:, order], keys[order]
    if config.method in ("top_n", "pca") and config.n > k:
        raise ConfigurationError(f"asked for {config.n} instruments from {k} candidates")

    if config.method == "top_n":
        chosen = np.argsort(-_abs_corr(y, Z), kind="stable")[: config.n]
        return Selection(Z[:, chosen], tuple(keys[chosen].tolist()), "top_n")

    if config.method == "pca":
        Zc = Z - Z.mean(axis=0)
        cov = Zc.T @ Zc / (Z.shape[0] - 1)
        vals, vecs = np.linalg.eigh(cov)
        vals, vecs = vals[::-1], vecs[:, ::-1]
        rank = int(np.sum(vals > PCA_RANK_TOL * max(vals[0], 0.0))) if vals[0] > 0 else 0
        notes = ()
        m = min(config.n, rank)
        if m < config.n:
            msg = f"candidates have rank {rank}; returning {m} of {config.n} components"
            warnings.warn(msg, SelectionWarning, stacklevel=2)
            notes = (msg,)
        if m == 0:
            raise EstimationError("candidate instruments have no variance")
        scores = Zc @ vecs[:, :m] / np.sqrt(vals[:m])
        return Selection(scores, tuple(range(1, m + 1)), "pca", notes)

    # lasso on centered endogenous and standardized candidates
    Zc = Z - Z.mean(axis=0)
    sd = np.sqrt(np.mean(Zc * Zc, axis=0))
    usable = sd > 0
    Zs = Zc[:, usable] / sd[usable]
    coef, delta = lasso_select(y - y.mean(), Zs, alpha=config.lasso_alpha,
                               constant=config.lasso_penalty_constant, delta=config.lasso_penalty)
    picked = np.flatnonzero(usable)[coef != 0.0]
    if picked.size == 0:
        msg = f"LASSO (delta={delta:.3g}) kept no candidates; falling back to the top-1 candidate"
        warnings.warn(msg, SelectionWarning, stacklevel=2)
        best = np.argsort(-_abs_corr(y, Z), kind="stable")[:1]
        return Selection(Z[:, best], tuple(keys[best].tolist()), "lasso", (msg,))
    return Selection(Z[:, picked], tuple(keys[picked].tolist()), "lasso")


def _select_linear(P, cov_P, A, keys, i, config: SelectionConfig) -> Selection:
    """Top-n / PCA selection for candidates ``P @ A`` using ``cov_P`` instead of the raw columns.

    Same result as :func:`select_instruments` on the materialised candidates,
    at ``O(M^3)`` cost per learner instead of ``O(n M^2)``.
    """
    cov_Z = A.T @ cov_P @ A
    if config.method == "top_n":
        cov_zx = A.T @ cov_P[:, i]
        denom = np.sqrt(np.diag(cov_Z) * cov_P[i, i])
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.nan_to_num(np.abs(cov_zx) / denom, nan=0.0)
        chosen = np.argsort(-r, kind="stable")[: config.n]
        return Selection(P @ A[:, chosen], tuple(keys[chosen].tolist()), "top_n")
    vals, vecs = np.linalg.eigh(cov_Z)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    rank = int(np.sum(vals > PCA_RANK_TOL * vals[0])) if vals[0] > 0 else 0
    m = min(config.n, rank)
    if m == 0:
        raise EstimationError("candidate instruments have no variance")
    notes = () if m == config.n else (f"candidates have rank {rank}; returning {m} of {config.n} components",)
    weights = A @ (vecs[:, :m] / np.sqrt(vals[:m]))
    scores = P @ weights
    return Selection(scores - scores.mean(axis=0), tuple(range(1, m + 1)), "pca", notes)


# ---------------------------------------------------------------------------
# the averaged estimator


def _fit_iv(spec: SecondPhaseSpec, y, endogenous, instruments, controls, names):
    fit = fit_2sri if spec.family == "logistic" else fit_2sls
    return fit(y, endogenous, instruments, controls, spec.intercept, names)


def ensembleiv_from_predictions(P_test, x_test, P_unlabel, y_unlabel, W_unlabel, spec: SecondPhaseSpec,
                                selection: SelectionConfig, *, residuals_test=None, beta_label=None,
                                estimator: str = "ensembleiv") -> CoefficientEstimate:
    """Run the per-learner transform/select/IV loop and average over learners.

    With ``residuals_test`` and ``beta_label`` the modified lambda is used
    instead of the standard one. Learners whose lambdas are all degenerate, or
    whose IV fit fails, are skipped and counted.
    """
    P_test = getattr(P_test, "values", P_test)
    P_unlabel = getattr(P_unlabel, "values", P_unlabel)
    P_test = np.asarray(P_test, dtype=float)
    P_unlabel = np.asarray(P_unlabel, dtype=float)
    y = np.asarray(y_unlabel, dtype=float).ravel()
    n_u = y.shape[0]
    W = np.asarray(W_unlabel, dtype=float).reshape(n_u, -1)
    M = P_test.shape[1]
    if M < 2 or P_unlabel.shape[1] != M:
        raise ShapeError("need at least two learners, with matching test and unlabeled columns")
    if P_unlabel.shape[0] != n_u:
        raise ShapeError("unlabeled predictions and outcome differ in length")
    spec.check_outcome(y)
    names = tuple(spec.names(W.shape[1]))
    lm = pairwise_lambda(P_test, x_test, residuals=residuals_test, beta_hat=beta_label)
    linear = selection.method in ("top_n", "pca")
    if linear:
        cov_P = np.cov(P_unlabel, rowvar=False)

    points, ses, f_stats = [], [], []
    degenerate = failed = 0
    n_instruments = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SelectionWarning)
        for i in range(M):
            if not lm.row_ok(i):
                degenerate += 1
                continue
            try:
                if linear:
                    keys, A = transform_weights(lm, i)
                    if selection.n > keys.size:
                        raise EstimationError("fewer valid candidates than requested instruments")
                    chosen = _select_linear(P_unlabel, cov_P, A, keys, i, selection)
                else:
                    keys, Z = transformed_candidates(lm, P_unlabel, i)
                    chosen = select_instruments(P_unlabel[:, i], Z, selection, keys=keys)
                fit = _fit_iv(spec, y, P_unlabel[:, i], chosen.columns, W, names)
            except EstimationError:
                failed += 1
                continue
            points.append(fit.point)
            ses.append(fit.se)
            f_stats.append(fit.diagnostics["first_stage_f"])
            n_instruments.append(chosen.columns.shape[1])
    if not points:
        raise EstimationError(f"all {M} learners skipped ({degenerate} degenerate, {failed} failed fits)")
    points = np.vstack(points)
    skipped = degenerate + failed
    return CoefficientEstimate(
        names, points.mean(axis=0), np.vstack(ses).mean(axis=0), estimator,
        diagnostics={
            "learners": M,
            "learners_used": len(points),
            "skipped_degenerate": degenerate,
            "skipped_failed": failed,
            "skipped_fraction": skipped / M,
            "mean_first_stage_f": float(np.mean(f_stats)),
            "mean_instruments": float(np.mean(n_instruments)),
            "learner_sd": points.std(axis=0, ddof=1).tolist() if len(points) > 1 else [0.0] * len(names),
            "selection": selection.label,
            "lambda_source": "standard" if residuals_test is None else "modified",
        },
    )


def ensembleiv(model: EnsembleModel, data: PartitionedDataset, spec: SecondPhaseSpec,
               selection: SelectionConfig) -> CoefficientEstimate:
    """Average IV estimate over all learners of a trained ensemble.

    ``data.test`` supplies lambda; estimation runs on ``data.unlabel``.
    """
    if len(data.test) < 3:
        raise ConfigurationError("test partition needs at least three labeled rows")
    P_test = predict_learners(model, data.test.V).values
    P_unl = predict_learners(model, data.unlabel.V).values
    return ensembleiv_from_predictions(P_test, data.test.X, P_unl, data.unlabel.Y, data.unlabel.W, spec, selection)


@dataclass(frozen=True, eq=False)
class FoldFit:
    fold: int
    train: Samples
    test: Samples
    model: EnsembleModel


def fit_fold_models(pool: Samples, K: int, task: str, params: EnsembleParams, rng: RngStream) -> list[FoldFit]:
    """Train one ensemble per fold on the pool minus that fold."""
    folds = partition_labeled(pool, K, rng.child(0))
    out = []
    for k in range(1, K + 1):
        train, test = folds.split(pool, k)
        out.append(FoldFit(k, train, test, train_ensemble(train, task, params, rng.child(1, k))))
    return out


def average_estimates(estimates: list[CoefficientEstimate], estimator: str, **extra) -> CoefficientEstimate:
    points = np.vstack([e.point for e in estimates])
    ses = np.vstack([e.se for e in estimates])
    diagnostics = {"fold_points": points.tolist(), **extra}
    return CoefficientEstimate(estimates[0].names, points.mean(axis=0), ses.mean(axis=0), estimator,
                               diagnostics=diagnostics)


def ensembleiv_crossfit(pool: Samples, unlabel: Samples, K: int, spec: SecondPhaseSpec,
                        selection: SelectionConfig, params: EnsembleParams, rng: RngStream,
                        *, task: str | None = None, fold_fits: list[FoldFit] | None = None) -> CoefficientEstimate:
    """K-fold cross-fitted estimator: each fold serves once as the lambda sample."""
    task = task or ("classification" if pool.labels_binary else "regression")
    fold_fits = fold_fits or fit_fold_models(pool, K, task, params, rng)
    estimates = []
    for ff in fold_fits:
        try:
            estimates.append(ensembleiv(ff.model, PartitionedDataset(ff.train, ff.test, unlabel), spec, selection))
        except EstimationError as exc:
            raise EstimationError(f"fold {ff.fold}: {exc}") from exc
    skipped = [e.diagnostics["skipped_fraction"] for e in estimates]
    return average_estimates(estimates, "ensembleiv_cf", folds=K, skipped_fraction=float(np.mean(skipped)),
                             selection=selection.label)
