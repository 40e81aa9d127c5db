"""Peripheral-feature diagnostic.

On a held-out labeled partition, each transformed instrument's error
``Ztilde_ij - X`` is correlated with the out-of-sample residual of the
error-free regression. The statistic is the mean absolute correlation over
learner pairs, and its null distribution comes from permuting the residuals.

Every error column is a fixed linear combination of a small base matrix
(the learner predictions and ``X``), so a permutation costs one
``base.T @ r`` product rather than one product per pair.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .benchmarks import fit_unbiased
from .data import Samples, SecondPhaseSpec
from .ensemble import EnsembleModel, predict_learners
from .errors import ConfigurationError, EstimationError, ShapeError
from .iv import LambdaMatrix, pairwise_lambda
from .regression import DesignMatrix
from .rng import RngStream

DEFAULT_PERMUTATIONS = 10_000
_BATCH = 256


class DiagnosticWarning(UserWarning):
    pass


@dataclass(eq=False)
class DiagnosticResult:
    pair_correlations: dict
    ts_observed: float
    permutation_distribution: np.ndarray = field(default_factory=lambda: np.empty(0))
    p_value: float = float("nan")
    permutations: int = 0
    excluded_pairs: tuple = ()

    def rejects(self, alpha: float = 0.05) -> bool:
        return bool(self.p_value <= alpha)

    def to_dict(self, max_pairs: int = 500) -> dict:
        pairs = {f"{i},{j}": c for (i, j), c in self.pair_correlations.items()}
        out = {
            "ts_observed": self.ts_observed,
            "p_value": self.p_value,
            "permutations": self.permutations,
            "n_pairs": len(pairs),
            "excluded_pairs": [list(p) for p in self.excluded_pairs],
        }
        if len(pairs) <= max_pairs:
            out["pair_correlations"] = pairs
        return out


@dataclass(frozen=True, eq=False)
class ErrorColumns:
    """Error columns ``base @ weights`` labeled by ``pairs``."""

    base: np.ndarray
    weights: np.ndarray
    pairs: tuple

    @classmethod
    def from_matrix(cls, columns, pairs=None) -> "ErrorColumns":
        columns = np.asarray(columns, dtype=float)
        if columns.ndim == 1:
            columns = columns[:, None]
        q = columns.shape[1]
        pairs = tuple(pairs) if pairs is not None else tuple((k, k) for k in range(q))
        if len(pairs) != q:
            raise ShapeError("one pair label per column")
        return cls(columns, np.eye(q), pairs)

    @property
    def values(self) -> np.ndarray:
        return self.base @ self.weights


def transformed_error_columns(lm: LambdaMatrix, P, x, pairs=None) -> ErrorColumns:
    """``Ztilde_ij - X`` for the requested (default: all valid) ordered pairs."""
    P = np.asarray(P, dtype=float)
    x = np.asarray(x, dtype=float).ravel()
    M = P.shape[1]
    if pairs is None:
        pairs = [(i, j) for i in range(M) for j in range(M) if lm.valid[i, j]]
    else:
        pairs = [tuple(p) for p in pairs if lm.valid[p[0], p[1]]]
    weights = np.zeros((M + 1, len(pairs)))
    for c, (i, j) in enumerate(pairs):
        weights[j, c] += lm.sigma[i]
        weights[i, c] -= lm.lam[i, j] * lm.sigma[j]
        weights[M, c] = -1.0
    return ErrorColumns(np.column_stack([P, x]), weights, tuple(pairs))


def raw_error_columns(P, x, pairs) -> ErrorColumns:
    """``Xhat_j - X`` for the candidate of each pair (before transformation)."""
    P = np.asarray(P, dtype=float)
    M = P.shape[1]
    weights = np.zeros((M + 1, len(pairs)))
    for c, (_, j) in enumerate(pairs):
        weights[j, c] = 1.0
        weights[M, c] = -1.0
    return ErrorColumns(np.column_stack([P, np.asarray(x, dtype=float)]), weights, tuple(pairs))


class _Correlator:
    """Correlations of the error columns with (permuted) residual vectors."""

    def __init__(self, cols: ErrorColumns, r):
        r = np.asarray(r, dtype=float).ravel()
        base = cols.base
        if base.shape[0] != r.shape[0]:
            raise ShapeError("error columns and residuals differ in length")
        if r.shape[0] < 3:
            raise ShapeError("need at least three diagnostic rows")
        self.base_c = base - base.mean(axis=0)
        cov_base = self.base_c.T @ self.base_c
        sd = np.sqrt(np.maximum(np.einsum("ij,ik,kj->j", cols.weights, cov_base, cols.weights), 0.0))
        keep = sd > 1e-12 * max(1.0, float(sd.max(initial=0.0)))
        self.excluded = tuple(p for p, k in zip(cols.pairs, keep) if not k)
        if self.excluded:
            warnings.warn(f"{len(self.excluded)} zero-variance error columns excluded", DiagnosticWarning,
                          stacklevel=3)
        self.pairs = tuple(p for p, k in zip(cols.pairs, keep) if k)
        if not self.pairs:
            raise EstimationError("every error column has zero variance")
        self.weights = cols.weights[:, keep] / sd[keep]
        self.r = r - r.mean()
        self.r_norm = float(np.sqrt(self.r @ self.r))

    def correlations(self, R) -> np.ndarray:
        """``R`` is ``n x b`` (already centered by construction: permutations keep the mean)."""
        if self.r_norm == 0.0:
            return np.zeros((len(self.pairs), R.shape[1]))
        return self.weights.T @ (self.base_c.T @ R) / self.r_norm

    def ts(self, R) -> np.ndarray:
        return np.abs(self.correlations(R)).mean(axis=0)


def compute_ts(columns, r, pairs=None) -> DiagnosticResult:
    """Mean absolute correlation between error columns and residuals.

    ``columns`` is an :class:`ErrorColumns` or an ``n x q`` matrix (with
    optional pair labels). Zero-variance columns are dropped with a warning and
    the mean is taken over the rest.
    """
    cols = columns if isinstance(columns, ErrorColumns) else ErrorColumns.from_matrix(columns, pairs)
    corr = _Correlator(cols, r)
    c = corr.correlations(corr.r[:, None])[:, 0]
    return DiagnosticResult(dict(zip(corr.pairs, c.tolist())), float(np.abs(c).mean()),
                            excluded_pairs=corr.excluded)


def ts_under_permutation(columns, r, perm, pairs=None) -> float:
    cols = columns if isinstance(columns, ErrorColumns) else ErrorColumns.from_matrix(columns, pairs)
    corr = _Correlator(cols, r)
    return float(corr.ts(corr.r[np.asarray(perm)][:, None])[0])


def permutation_test(columns, r, permutations: int, rng: RngStream, pairs=None) -> DiagnosticResult:
    """Permutation p-value ``(1 + #{TS_perm >= TS_obs}) / (P + 1)``."""
    if permutations < 100:
        raise ConfigurationError("use at least 100 permutations")
    cols = columns if isinstance(columns, ErrorColumns) else ErrorColumns.from_matrix(columns, pairs)
    result = compute_ts(cols, r)
    corr = _quiet_correlator(cols, r)
    g = rng.generator()
    n = corr.r.shape[0]
    dist = np.empty(permutations)
    for start in range(0, permutations, _BATCH):
        b = min(_BATCH, permutations - start)
        idx = np.stack([g.permutation(n) for _ in range(b)], axis=1)
        dist[start:start + b] = corr.ts(corr.r[idx])
    # tolerance guards against rounding when a permutation reproduces the observed order
    exceed = int(np.sum(dist >= result.ts_observed - 1e-12 * max(1.0, result.ts_observed)))
    result.permutation_distribution = dist
    result.permutations = permutations
    result.p_value = (1 + exceed) / (permutations + 1)
    return result


def _quiet_correlator(cols, r):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DiagnosticWarning)
        return _Correlator(cols, r)


def fisher_combine(p_values, *, permutations: int = DEFAULT_PERMUTATIONS) -> float:
    """Fisher's method: ``-2 sum log p`` against chi-squared with ``2K`` degrees of freedom.

    A zero p-value is clamped to ``1 / (permutations + 1)`` with a warning.
    """
    p = np.asarray(p_values, dtype=float).ravel()
    if p.size == 0:
        raise ConfigurationError("no p-values to combine")
    if np.any((p < 0) | (p > 1)) or not np.isfinite(p).all():
        raise ConfigurationError("p-values must lie in [0, 1]")
    if np.any(p == 0):
        warnings.warn("zero p-value clamped to 1/(P+1)", DiagnosticWarning, stacklevel=2)
        p = np.where(p == 0, 1.0 / (permutations + 1), p)
    statistic = -2.0 * float(np.sum(np.log(p)))
    return float(stats.chi2.sf(statistic, 2 * p.size))


def fisher_statistic(p_values) -> float:
    return -2.0 * float(np.sum(np.log(np.asarray(p_values, dtype=float))))


# ---------------------------------------------------------------------------
# residuals and the full pipeline


def diagnostic_residuals(fit_rows: Samples, diagnostic: Samples, spec: SecondPhaseSpec) -> np.ndarray:
    """Residuals on ``diagnostic`` of the error-free regression fitted on ``fit_rows``.

    Linear: ``Y - Xb``. Logistic: response residuals ``Y - p``.
    """
    fit = fit_unbiased(fit_rows, spec)
    design = DesignMatrix.build(diagnostic.X, diagnostic.W, intercept=spec.intercept)
    index = design.matrix @ fit.point
    if spec.family == "logistic":
        return diagnostic.Y - 1.0 / (1.0 + np.exp(-index))
    return diagnostic.Y - index


def diagnostic_from_predictions(P_test, x_test, P_diag, x_diag, r_diag, *, permutations: int,
                                rng: RngStream, pairs=None) -> tuple[DiagnosticResult, DiagnosticResult]:
    """Run the test on transformed columns; also return raw-candidate correlations.

    Returns ``(transformed, raw)``; only the first carries a p-value.
    """
    lm = pairwise_lambda(P_test, x_test)
    cols = transformed_error_columns(lm, P_diag, x_diag, pairs)
    result = permutation_test(cols, r_diag, permutations, rng)
    raw = compute_ts(raw_error_columns(P_diag, x_diag, cols.pairs), r_diag)
    return result, raw


def run_diagnostic(model: EnsembleModel, train: Samples, test: Samples, diagnostic: Samples,
                   spec: SecondPhaseSpec, *, permutations: int = DEFAULT_PERMUTATIONS,
                   rng: RngStream) -> tuple[DiagnosticResult, DiagnosticResult]:
    """End-to-end diagnostic: lambdas on ``test``, correlations on ``diagnostic``.

    The residual model is fitted on train and test together. Returns
    ``(transformed, raw)`` as :func:`diagnostic_from_predictions` does.
    """
    for name, part in (("train", train), ("test", test), ("diagnostic", diagnostic)):
        if not part.has_labels:
            raise ConfigurationError(f"{name} rows must carry labels")
    r = diagnostic_residuals(Samples.concat([train, test]), diagnostic, spec)
    P_test = predict_learners(model, test.V).values
    P_diag = predict_learners(model, diagnostic.V).values
    return diagnostic_from_predictions(P_test, test.X, P_diag, diagnostic.X, r,
                                       permutations=permutations, rng=rng)


# ---------------------------------------------------------------------------
# relevance / exclusion descriptives


@dataclass(frozen=True, eq=False)
class RelevanceExclusionSummary:
    relevance: np.ndarray  # per learner
    exclusion: np.ndarray
    stage: str

    def to_dict(self) -> dict:
        return {"stage": self.stage, "relevance": self.relevance.tolist(), "exclusion": self.exclusion.tolist(),
                "mean_relevance": float(self.relevance.mean()), "mean_exclusion": float(self.exclusion.mean())}


def _abs_corr_matrix(v, Z):
    vc = v - v.mean()
    Zc = Z - Z.mean(axis=0)
    denom = np.sqrt((vc @ vc) * np.sum(Zc * Zc, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.nan_to_num(np.abs(vc @ Zc) / denom, nan=0.0)


def relevance_exclusion_summary(P, x, instrument_sets, stage: str) -> RelevanceExclusionSummary:
    """Per-learner mean ``|Corr(Xhat_i, z)|`` and ``|Corr(Xhat_i - X, z)|`` over its instruments.

    ``instrument_sets[i]`` is the ``n x k_i`` instrument matrix for learner ``i``.
    """
    if stage not in ("before", "after"):
        raise ConfigurationError("stage is 'before' or 'after'")
    P = np.asarray(P, dtype=float)
    x = np.asarray(x, dtype=float).ravel()
    rel, exc = [], []
    for i, Z in enumerate(instrument_sets):
        Z = np.asarray(Z, dtype=float)
        Z = Z[:, None] if Z.ndim == 1 else Z
        if Z.shape[1] == 0:
            raise ConfigurationError(f"learner {i} has an empty instrument set")
        rel.append(_abs_corr_matrix(P[:, i], Z).mean())
        exc.append(_abs_corr_matrix(P[:, i] - x, Z).mean())
    return RelevanceExclusionSummary(np.clip(rel, 0, 1), np.clip(exc, 0, 1), stage)


def paired_reduction_test(before, after) -> tuple[float, float]:
    """One-sided paired t-test that ``after`` is smaller than ``before``: ``(t, p)``."""
    res = stats.ttest_rel(np.asarray(before, dtype=float), np.asarray(after, dtype=float), alternative="greater")
    return float(res.statistic), float(res.pvalue)


__all__ = [
    "DiagnosticResult", "DiagnosticWarning", "ErrorColumns", "RelevanceExclusionSummary", "compute_ts",
    "diagnostic_from_predictions", "diagnostic_residuals", "fisher_combine", "fisher_statistic",
    "paired_reduction_test", "permutation_test", "raw_error_columns", "relevance_exclusion_summary",
    "run_diagnostic", "transformed_error_columns", "ts_under_permutation",
]
