"""Second-phase estimators: OLS, IRLS logistic regression, 2SLS, 2SRI, bootstrap."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit

from .data import PartitionedDataset, Samples
from .errors import (
    BootstrapDegeneracyError,
    ConfigurationError,
    ConvergenceError,
    EstimationError,
    ShapeError,
    SingularDesignError,
)
from .rng import RngStream

RANK_TOL = 1e-10
RESIDUAL_TOL = 1e-10  # relative norm below which a stage-1 residual counts as zero

ESTIMATORS = frozenset(
    {"ols", "logistic", "2sls", "2sri", "ensembleiv", "ensembleiv_cf", "biased", "unbiased", "regcal", "extended"}
)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    names: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        if m.shape[1] != len(self.names):
            raise ShapeError(f"{len(self.names)} names for {m.shape[1]} columns")
        if not np.isfinite(m).all():
            raise ConfigurationError("design matrix has non-finite entries")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def build(cls, mlv, controls=None, *, intercept=True, mlv_name="mlv", control_names=None):
        n = np.asarray(mlv).shape[0]
        controls = np.empty((n, 0)) if controls is None else np.asarray(controls, dtype=float).reshape(n, -1)
        control_names = list(control_names or [f"w{k + 1}" for k in range(controls.shape[1])])
        cols = ([np.ones(n)] if intercept else []) + [np.asarray(mlv, dtype=float)] + list(controls.T)
        names = (["intercept"] if intercept else []) + [mlv_name] + control_names
        return cls(tuple(names), np.column_stack(cols))


@dataclass(eq=False)
class CoefficientEstimate:
    names: tuple[str, ...]
    point: np.ndarray
    se: np.ndarray
    estimator: str
    se_source: str = "analytic"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.names = tuple(self.names)
        self.point = np.asarray(self.point, dtype=float)
        self.se = np.asarray(self.se, dtype=float)
        if not (len(self.names) == self.point.shape[0] == self.se.shape[0]):
            raise ShapeError("names, point and se must have equal length")
        if np.any(self.se < 0):
            raise ValueError("standard errors must be non-negative")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator tag {self.estimator!r}")
        if self.se_source not in ("analytic", "bootstrap"):
            raise ValueError(f"unknown se_source {self.se_source!r}")

    def __getitem__(self, name: str) -> float:
        return float(self.point[self.names.index(name)])

    def se_of(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "point": self.point.tolist(),
            "se": self.se.tolist(),
            "estimator": self.estimator,
            "se_source": self.se_source,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoefficientEstimate":
        return cls(tuple(d["names"]), np.array(d["point"], dtype=float), np.array(d["se"], dtype=float),
                   d["estimator"], d.get("se_source", "analytic"), dict(d.get("diagnostics", {})))


@dataclass
class _LeastSquares:
    coef: np.ndarray
    resid: np.ndarray
    xtx_inv: np.ndarray
    condition: float


def _least_squares(X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> _LeastSquares:
    n, k = X.shape
    if n <= k:
        raise SingularDesignError(f"{n} rows cannot identify {k} coefficients", names)
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * diag[0])) if diag[0] > 0 else 0
    if rank < k:
        bad = [names[j] for j in piv[rank:]]
        raise SingularDesignError(f"design is rank deficient; dependent columns: {bad}", bad)
    coef_p = linalg.solve_triangular(R, Q.T @ y)
    r_inv = linalg.solve_triangular(R, np.eye(k))
    inv_p = r_inv @ r_inv.T
    coef = np.empty(k)
    coef[piv] = coef_p
    xtx_inv = np.empty((k, k))
    xtx_inv[np.ix_(piv, piv)] = inv_p
    return _LeastSquares(coef, y - X @ coef, xtx_inv, float(diag[0] / diag[-1]))


def fit_ols(design: DesignMatrix, y, *, estimator: str = "ols") -> CoefficientEstimate:
    """Least squares via pivoted QR with homoscedastic standard errors."""
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != design.n:
        raise ShapeError(f"outcome has {y.shape[0]} rows, design {design.n}")
    ls = _least_squares(design.matrix, y, design.names)
    n, k = design.matrix.shape
    sigma2 = ls.resid @ ls.resid / (n - k)
    se = np.sqrt(np.maximum(sigma2 * np.diag(ls.xtx_inv), 0.0))
    return CoefficientEstimate(design.names, ls.coef, se, estimator,
                               diagnostics={"condition_number": ls.condition, "sigma2": float(sigma2), "n": n})


def ols_residuals(design: DesignMatrix, y) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    return _least_squares(design.matrix, y, design.names).resid


def logistic_loglik(X, y, beta) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(design: DesignMatrix, y, *, max_iter: int = 100, tol: float = 1e-8,
                 separation_norm: float = 1e4, estimator: str = "logistic") -> CoefficientEstimate:
    """Maximum-likelihood logistic regression by Newton/IRLS.

    Converged when the largest coefficient change drops below ``tol``;
    a coefficient norm above ``separation_norm`` is treated as separation.
    """
    y = np.asarray(y, dtype=float).ravel()
    X = design.matrix
    if y.shape[0] != design.n:
        raise ShapeError(f"outcome has {y.shape[0]} rows, design {design.n}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ConfigurationError("logistic regression needs a 0/1 outcome")
    _least_squares(X, y, design.names)  # rank check
    beta = np.zeros(X.shape[1])
    trace = []
    for it in range(1, max_iter + 1):
        prob = expit(X @ beta)
        w = prob * (1.0 - prob)
        info = (X * w[:, None]).T @ X
        score = X.T @ (y - prob)
        try:
            step = linalg.solve(info, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError) as exc:
            raise ConvergenceError(f"information matrix became singular at iteration {it}", trace) from exc
        beta = beta + step
        change = float(np.max(np.abs(step)))
        trace.append(change)
        norm = float(np.linalg.norm(beta))
        if not np.isfinite(norm) or norm > separation_norm:
            raise ConvergenceError(f"coefficients diverging (norm {norm:.3g}); likely separation", trace)
        if change < tol:
            break
    else:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", trace)
    prob = expit(X @ beta)
    info = (X * (prob * (1.0 - prob))[:, None]).T @ X
    try:
        cov = linalg.inv(info)
    except linalg.LinAlgError as exc:
        raise ConvergenceError("information matrix singular at the optimum", trace) from exc
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return CoefficientEstimate(design.names, beta, se, estimator,
                               diagnostics={"iterations": it, "loglik": logistic_loglik(X, y, beta), "n": design.n})


def _prepare_iv(y, endogenous, instruments, controls):
    y = np.asarray(y, dtype=float).ravel()
    n = y.shape[0]
    x = np.asarray(endogenous, dtype=float).ravel()
    Z = np.asarray(instruments, dtype=float).reshape(n, -1)
    W = np.empty((n, 0)) if controls is None else np.asarray(controls, dtype=float).reshape(n, -1)
    if x.shape[0] != n:
        raise ShapeError("endogenous column length differs from outcome")
    if Z.shape[1] < 1:
        raise ConfigurationError("IV estimation needs at least one instrument")
    return y, x, Z, W


def _names(names, intercept, n_controls):
    if names is not None:
        return tuple(names)
    return tuple((["intercept"] if intercept else []) + ["mlv"] + [f"w{k + 1}" for k in range(n_controls)])


def _first_stage(x, Z, W, intercept):
    n = x.shape[0]
    exog_cols = ([np.ones(n)] if intercept else []) + list(W.T)
    exog = np.column_stack(exog_cols) if exog_cols else np.empty((n, 0))
    full = np.column_stack([exog, Z])
    stage1_names = [f"exog{j}" for j in range(exog.shape[1])] + [f"instrument{j}" for j in range(Z.shape[1])]
    ls = _least_squares(full, x, stage1_names)
    rss_u = ls.resid @ ls.resid
    if exog.shape[1]:
        r = x - exog @ np.linalg.lstsq(exog, x, rcond=None)[0]
        rss_r = r @ r
    else:
        rss_r = x @ x
    df = n - full.shape[1]
    f_stat = ((rss_r - rss_u) / Z.shape[1]) / (rss_u / df) if rss_u > 0 else np.inf
    return x - ls.resid, ls.resid, float(f_stat)


def fit_2sls(y, endogenous, instruments, controls=None, intercept: bool = True, names=None,
             *, estimator: str = "2sls") -> CoefficientEstimate:
    """Two-stage least squares with one endogenous regressor.

    Standard errors use residuals computed with the original endogenous column.
    """
    y, x, Z, W = _prepare_iv(y, endogenous, instruments, controls)
    names = _names(names, intercept, W.shape[1])
    n = y.shape[0]
    fitted, _, f_stat = _first_stage(x, Z, W, intercept)
    lead = [np.ones(n)] if intercept else []
    X2 = np.column_stack(lead + [fitted] + list(W.T))
    ls = _least_squares(X2, y, names)
    X_orig = np.column_stack(lead + [x] + list(W.T))
    resid = y - X_orig @ ls.coef
    k = X2.shape[1]
    sigma2 = resid @ resid / (n - k)
    se = np.sqrt(np.maximum(sigma2 * np.diag(ls.xtx_inv), 0.0))
    return CoefficientEstimate(names, ls.coef, se, estimator,
                               diagnostics={"first_stage_f": f_stat, "condition_number": ls.condition,
                                            "n_instruments": Z.shape[1], "n": n})


def fit_2sri(y, endogenous, instruments, controls=None, intercept: bool = True, names=None,
             *, estimator: str = "2sri", **logit_kw) -> CoefficientEstimate:
    """Two-stage residual inclusion (control function) for a logistic second phase."""
    y, x, Z, W = _prepare_iv(y, endogenous, instruments, controls)
    names = _names(names, intercept, W.shape[1])
    _, resid1, f_stat = _first_stage(x, Z, W, intercept)
    n = y.shape[0]
    lead = [np.ones(n)] if intercept else []
    cols = lead + [x] + list(W.T)
    k = len(names)
    if np.linalg.norm(resid1) <= RESIDUAL_TOL * max(np.linalg.norm(x), 1.0):
        # instruments reproduce the endogenous column: no control function to include
        fit = fit_logistic(DesignMatrix(names, np.column_stack(cols)), y, **logit_kw)
        residual_coef = 0.0
    else:
        fit = fit_logistic(DesignMatrix(names + ("_stage1_residual",), np.column_stack(cols + [resid1])), y,
                           **logit_kw)
        residual_coef = float(fit.point[k])
    return CoefficientEstimate(names, fit.point[:k], fit.se[:k], estimator,
                               diagnostics={"first_stage_f": f_stat, "residual_coef": residual_coef,
                                            "iterations": fit.diagnostics["iterations"], "n": n})


# ---------------------------------------------------------------------------
# bootstrap


def _resample(part: Samples, gen: np.random.Generator, id_offset: int) -> Samples:
    rows = gen.integers(0, len(part), size=len(part))
    s = part.take(rows)
    # resampled rows are new identities so partitions stay disjoint
    return Samples(V=s.V, Y=s.Y, W=s.W, X=s.X, ids=np.arange(len(s)) + id_offset)


def resample_partitions(data: PartitionedDataset, rng: RngStream) -> PartitionedDataset:
    """Resample each partition independently, with replacement, at its original size."""
    parts = data.partitions()
    out, offset = {}, 0
    for k, (name, part) in enumerate(parts.items()):
        out[name] = _resample(part, rng.child(k).generator(), offset)
        offset += len(part)
    return PartitionedDataset(out["train"], out["test"], out["unlabel"], out.get("diagnostic"))


def bootstrap_estimates(procedure: Callable[[PartitionedDataset], CoefficientEstimate],
                        data: PartitionedDataset, B: int, rng: RngStream,
                        *, max_failure_fraction: float = 0.5) -> CoefficientEstimate:
    """Partition-wise bootstrap of an end-to-end estimation procedure.

    Failed replicates (any :class:`EstimationError`) are dropped and counted.
    """
    if B < 2:
        raise ConfigurationError("bootstrap needs B >= 2")
    base = procedure(data)
    draws, failed = [], 0
    for b in range(B):
        try:
            draws.append(np.asarray(procedure(resample_partitions(data, rng.child(b))).point, dtype=float))
        except EstimationError:
            failed += 1
    if failed > max_failure_fraction * B or len(draws) < 2:
        raise BootstrapDegeneracyError(f"{failed} of {B} bootstrap replicates failed")
    draws = np.vstack(draws)
    diagnostics = dict(base.diagnostics)
    diagnostics.update({"bootstrap_replicates": B, "bootstrap_failed": failed,
                        "bootstrap_failure_fraction": failed / B})
    return CoefficientEstimate(base.names, base.point, draws.std(axis=0, ddof=1), base.estimator,
                               "bootstrap", diagnostics)
