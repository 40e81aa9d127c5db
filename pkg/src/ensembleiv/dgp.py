"""Synthetic data-generating processes.

``main``: a learnable-but-imperfect first-phase task on ten uniform features,
followed by the linear or logistic second phase
``Y = 1 + 0.5 X + 2 W1 + W2 (+ eps)`` with ``W1 ~ U(-10, 10)``,
``W2 ~ N(0, 10^2)`` and ``eps ~ N(0, 2^2)``.

``peripheral``: two noisy copies of ``X`` whose errors also enter the outcome
error, so that prediction errors correlate with the regression error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import PartitionedDataset, Samples, random_split
from .errors import ConfigurationError
from .rng import RngStream

MAIN_TRUTH = (1.0, 0.5, 2.0, 1.0)
PERIPHERAL_TRUTH = (1.0, 1.0, 0.5)


@dataclass(frozen=True)
class MainDgpConfig:
    mlv_family: str = "continuous"
    second_phase: str = "linear"
    n_label: int = 1500
    n_unlabel: int = 7000
    n_features: int = 10
    feature_noise: float = 0.3
    sigma_eps: float = 2.0
    coefficients: tuple[float, ...] = MAIN_TRUTH

    def __post_init__(self):
        if self.mlv_family not in ("continuous", "binary"):
            raise ConfigurationError(f"unknown mlv_family {self.mlv_family!r}")
        if self.second_phase not in ("linear", "logistic"):
            raise ConfigurationError(f"unknown second_phase {self.second_phase!r}")
        if self.n_label < 4 or self.n_unlabel <= self.n_label:
            raise ConfigurationError("need n_unlabel > n_label >= 4")
        if self.n_features < 4:
            raise ConfigurationError("the feature map uses at least four features")
        if self.sigma_eps < 0 or self.feature_noise < 0:
            raise ConfigurationError("noise scales must be non-negative")
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        if len(self.coefficients) != 4:
            raise ConfigurationError("coefficients are (intercept, mlv, w1, w2)")


def main_signal(V) -> np.ndarray:
    """Noise-free part of the first-phase target."""
    V = np.asarray(V, dtype=float)
    return np.sin(4.0 * V[:, 0]) + V[:, 1] * V[:, 2] + 2.0 * (V[:, 3] > 0.5)


def generate_main(config: MainDgpConfig, rng: RngStream) -> Samples:
    """All ``n_label + n_unlabel`` rows with oracle labels."""
    n = config.n_label + config.n_unlabel
    g = rng.generator()
    V = g.uniform(0.0, 1.0, size=(n, config.n_features))
    x = main_signal(V) + g.normal(0.0, config.feature_noise, size=n)
    if config.mlv_family == "binary":
        x = (x > np.median(x)).astype(float)
    W = np.column_stack([g.uniform(-10.0, 10.0, size=n), g.normal(0.0, 10.0, size=n)])
    b0, b1, b2, b3 = config.coefficients
    index = b0 + b1 * x + b2 * W[:, 0] + b3 * W[:, 1]
    if config.second_phase == "linear":
        y = index + g.normal(0.0, config.sigma_eps, size=n)
    else:
        y = (g.uniform(size=n) < expit(index)).astype(float)
    return Samples(V=V, Y=y, W=W, X=x)


def generate_main_dgp(config: MainDgpConfig, rng: RngStream, *, k: int = 4) -> PartitionedDataset:
    """Labeled pool split ``(k-1)/k`` train and ``1/k`` test, plus the unlabeled rows.

    Unlabeled rows keep their oracle labels for evaluation; estimators do not
    read them.
    """
    data = generate_main(config, rng.child(0))
    n_test = config.n_label // k
    train, test, unlabel = random_split(
        data, [config.n_label - n_test, n_test, config.n_unlabel], rng.child(1))
    return PartitionedDataset(train, test, unlabel)


@dataclass(frozen=True)
class PeripheralDgpConfig:
    sigma: float = 0.2
    n_total: int = 5000
    split: tuple[int, ...] = (3000, 1000, 1000)  # train, test, diagnostic-or-unlabel
    common_error_sd: float = 0.1
    mu_sd: float = 0.2
    tau_sd: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")
        object.__setattr__(self, "split", tuple(int(s) for s in self.split))
        if len(self.split) != 3 or sum(self.split) != self.n_total or min(self.split) < 3:
            raise ConfigurationError("split must be three sizes (>= 3 each) summing to n_total")


@dataclass(frozen=True, eq=False)
class PeripheralSample:
    """One peripheral draw: ``X1`` (endogenous), ``X2`` (candidate), with oracle parts."""

    X: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    eps: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    e: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    def take(self, index) -> "PeripheralSample":
        return PeripheralSample(**{k: getattr(self, k)[index] for k in
                                   ("X", "X1", "X2", "W", "Y", "eps", "e1", "e2", "e")})

    @property
    def predictions(self) -> np.ndarray:
        return np.column_stack([self.X1, self.X2])


def generate_peripheral_dgp(config: PeripheralDgpConfig, rng: RngStream) -> tuple[PeripheralSample, ...]:
    """Draw ``n_total`` rows and split them by ``config.split`` (train, test, third)."""
    n = config.n_total
    g = rng.generator()
    X = g.normal(0.0, 1.0, size=n)
    W = g.uniform(0.0, 1.0, size=n)
    e1 = g.normal(0.0, config.sigma, size=n)
    e2 = g.normal(0.0, config.sigma, size=n)
    mu = g.normal(0.0, config.mu_sd, size=n)
    tau = g.normal(0.0, config.tau_sd, size=n)
    e = g.normal(0.0, config.common_error_sd, size=n)
    eps = e1 + e2 + mu + tau
    b0, b1, b2 = PERIPHERAL_TRUTH
    sample = PeripheralSample(X=X, X1=X + e1 + e, X2=X + e2 + e, W=W, Y=b0 + b1 * X + b2 * W + eps,
                              eps=eps, e1=e1, e2=e2, e=e)
    order = g.permutation(n)
    bounds = np.cumsum([0, *config.split])
    return tuple(sample.take(np.sort(order[a:b])) for a, b in zip(bounds[:-1], bounds[1:]))
