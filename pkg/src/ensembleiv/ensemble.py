"""Bagged forests and gradient-boosted trees, exposed learner by learner.

For bagging, learner ``i`` is tree ``i``. For boosting, learner ``i`` is the
cumulative model built from trees ``1..i``:
``init + learning_rate * sum(tree_t)`` on the link scale, passed through the
logistic function for classification.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from .data import Samples
from .errors import ConfigurationError, DataIOError, ShapeError
from .rng import RngStream
from .trees import LEAF, CartTree, default_feature_subsample, train_cart

FORMAT_NAME = "ensembleiv-model"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EnsembleParams:
    technique: str = "bagging"
    n_learners: int = 100
    max_depth: int | None = None  # None: 25 for bagging, 6 for boosting
    min_leaf: int = 5
    feature_subsample: int | None = None  # bagging only; None: sqrt(p) / p/3 rule
    learning_rate: float = 0.3  # boosting only; XGBoost default shrinkage

    def __post_init__(self):
        if self.technique not in ("bagging", "boosting"):
            raise ConfigurationError(f"unknown ensemble technique {self.technique!r}")
        if self.technique == "boosting" and not 0 < self.learning_rate <= 1:
            raise ConfigurationError("learning_rate must lie in (0, 1]")

    @property
    def depth(self) -> int:
        if self.max_depth is not None:
            return self.max_depth
        return 25 if self.technique == "bagging" else 6


@dataclass(frozen=True, eq=False)
class LearnerPredictionMatrix:
    values: np.ndarray
    learner_kind: str = "individual"
    task: str = "regression"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ShapeError("prediction matrix must be 2-d (rows x learners)")
        if not np.isfinite(values).all():
            raise ConfigurationError("prediction matrix has non-finite entries")
        if self.task == "classification" and (values.min() < 0 or values.max() > 1):
            raise ConfigurationError("classification predictions must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def n_learners(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    technique: str
    trees: tuple[CartTree, ...]
    task: str = "regression"
    learning_rate: float = 1.0
    init_value: float = 0.0
    feature_subsample: int | None = None
    n_features: int = 0
    params: EnsembleParams = field(default_factory=EnsembleParams)

    @property
    def n_learners(self) -> int:
        return len(self.trees)

    def _tree_outputs(self, V) -> np.ndarray:
        V = np.ascontiguousarray(V, dtype=float)
        if V.ndim != 2 or V.shape[1] != self.n_features:
            raise ShapeError(f"model expects {self.n_features} features, got shape {V.shape}")
        out = np.empty((V.shape[0], len(self.trees)))
        for i, tree in enumerate(self.trees):
            out[:, i] = tree.predict(V)
        return out

    def link_predictions(self, V) -> np.ndarray:
        """Cumulative link-scale predictions (boosting only)."""
        if self.technique != "boosting":
            raise ConfigurationError("link-scale cumulative predictions exist only for boosting")
        return self.init_value + self.learning_rate * np.cumsum(self._tree_outputs(V), axis=1)


def train_ensemble(data: Samples, task: str, params: EnsembleParams, rng: RngStream) -> EnsembleModel:
    """Fit ``params.n_learners`` trees on the labeled samples."""
    if not data.has_labels or len(data) == 0:
        raise ConfigurationError("ensemble training needs labeled samples")
    if params.n_learners < 2:
        raise ConfigurationError("an ensemble needs at least two learners")
    if task not in ("regression", "classification"):
        raise ConfigurationError(f"unknown task {task!r}")
    if task == "classification" and not data.labels_binary:
        raise ConfigurationError("classification labels must be 0/1")
    V, x = data.V, data.X
    n, p = V.shape
    if params.technique == "bagging":
        return _train_bagging(V, x, task, params, rng)
    return _train_boosting(V, x, task, params, rng)


def _train_bagging(V, x, task, params, rng):
    n, p = V.shape
    n_sub = params.feature_subsample or default_feature_subsample(p, task)
    trees = []
    for i in range(params.n_learners):
        stream = rng.child(i)
        rows = stream.child(0).generator().integers(0, n, size=n)
        trees.append(
            train_cart(V, x, task=task, max_depth=params.depth, min_leaf=params.min_leaf,
                       feature_subsample=n_sub, rng=stream.child(1), sample_index=rows)
        )
    return EnsembleModel("bagging", tuple(trees), task=task, feature_subsample=n_sub,
                         n_features=p, params=params)


def _train_boosting(V, x, task, params, rng):
    n, p = V.shape
    lr = params.learning_rate
    if task == "regression":
        init = float(np.mean(x))
    else:
        rate = float(np.mean(x))
        if rate in (0.0, 1.0):
            raise ConfigurationError("boosting classification needs both classes present")
        init = float(logit(rate))
    F = np.full(n, init)
    trees = []
    for i in range(params.n_learners):
        if task == "regression":
            tree = train_cart(V, x - F, max_depth=params.depth, min_leaf=params.min_leaf, rng=rng.child(i))
        else:
            prob = expit(F)
            grad = x - prob
            tree = train_cart(V, grad, max_depth=params.depth, min_leaf=params.min_leaf, rng=rng.child(i))
            # Newton leaf values for the logistic loss
            leaves = tree.leaf_index(V)
            hess = prob * (1.0 - prob)
            num = np.bincount(leaves, weights=grad, minlength=tree.n_nodes)
            den = np.bincount(leaves, weights=hess, minlength=tree.n_nodes)
            values = np.where(tree.feature == LEAF, num / np.maximum(den, 1e-12), 0.0)
            tree = tree.with_values(values)
        F = F + lr * tree.predict(V)
        trees.append(tree)
    return EnsembleModel("boosting", tuple(trees), task=task, learning_rate=lr, init_value=init,
                         n_features=p, params=params)


def predict_learners(model: EnsembleModel, V) -> LearnerPredictionMatrix:
    """One column per learner (individual trees or cumulative boosting learners)."""
    if isinstance(V, Samples):
        V = V.V
    if model.technique == "bagging":
        return LearnerPredictionMatrix(model._tree_outputs(V), "individual", model.task)
    link = model.link_predictions(V)
    values = expit(link) if model.task == "classification" else link
    return LearnerPredictionMatrix(values, "cumulative", model.task)


def predict_aggregate(model: EnsembleModel, V) -> np.ndarray:
    """Bagging: mean over trees. Boosting: the full model (last cumulative learner)."""
    cols = predict_learners(model, V).values
    if model.technique == "bagging":
        return cols.mean(axis=1)
    return cols[:, -1]


def subset_models(model: EnsembleModel, order) -> EnsembleModel:
    """Same ensemble with its trees reordered (or subset) by ``order``."""
    return replace(model, trees=tuple(model.trees[i] for i in order))


# ---------------------------------------------------------------------------
# serialization: JSON header plus one preorder node list per tree


def _tree_to_preorder(tree: CartTree) -> list:
    nodes = []
    for node in range(tree.n_nodes):
        if tree.feature[node] == LEAF:
            nodes.append([-1, float(tree.value[node])])
        else:
            nodes.append([int(tree.feature[node]), float(tree.threshold[node])])
    return nodes


def _tree_from_preorder(nodes, task, n_features) -> CartTree:
    m = len(nodes)
    feature = np.full(m, LEAF, np.int64)
    threshold = np.zeros(m)
    value = np.zeros(m)
    left = np.full(m, -1, np.int64)
    right = np.full(m, -1, np.int64)
    pending = []  # internal nodes still waiting for a right child
    for k, (f, v) in enumerate(nodes):
        if k > 0:
            parent = k - 1
            if feature[parent] != LEAF and left[parent] < 0:
                left[parent] = k
            else:
                right[pending.pop()] = k
        if f == LEAF:
            value[k] = v
        else:
            feature[k] = int(f)
            threshold[k] = v
            pending.append(k)
    if pending:
        raise DataIOError("truncated tree encoding")
    return CartTree(feature, threshold, left, right, value, task=task, n_features=n_features)


def save_model(model: EnsembleModel, path) -> None:
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "technique": model.technique,
        "task": model.task,
        "learning_rate": model.learning_rate,
        "init_value": model.init_value,
        "feature_subsample": model.feature_subsample,
        "n_features": model.n_features,
        "trees": [_tree_to_preorder(t) for t in model.trees],
    }
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh)
    except OSError as exc:
        raise DataIOError(f"{path}: {exc}") from exc


def load_model(path) -> EnsembleModel:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataIOError(f"{path}: {exc}") from exc
    if payload.get("format") != FORMAT_NAME or payload.get("version") != FORMAT_VERSION:
        raise DataIOError(f"{path}: not a version-{FORMAT_VERSION} {FORMAT_NAME} file")
    p = payload["n_features"]
    trees = tuple(_tree_from_preorder(nodes, payload["task"], p) for nodes in payload["trees"])
    return EnsembleModel(payload["technique"], trees, task=payload["task"],
                         learning_rate=payload["learning_rate"], init_value=payload["init_value"],
                         feature_subsample=payload["feature_subsample"], n_features=p)
