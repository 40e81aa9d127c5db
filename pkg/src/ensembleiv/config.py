"""YAML configuration files.

A config file is a mapping with optional sections::

    seed: 7
    dgp: {mlv_family: continuous, second_phase: linear, n_label: 1500, n_unlabel: 7000}
    ensemble: {technique: bagging, n_learners: 100, min_leaf: 5}
    selection: [{method: pca, n: 3}, {method: top_n, n: 3}]
    harness: {reps: 50, k: 4, estimators: [biased, unbiased, ensembleiv_cf]}
    diagnostic: {permutations: 10000, alpha: 0.05, fraction: 0.2}
    peripheral: {sigmas: [0.02, 0.4], reps: 100, permutations: 1000}
    data: {labeled: lab.csv, unlabeled: unl.csv, schema: "y=y,x=x,w=w1,w2,v=v1,v2", family: linear}

Unknown keys are rejected so typos surface as configuration errors.
"""
from __future__ import annotations

import dataclasses

import yaml

from .dgp import MainDgpConfig
from .ensemble import EnsembleParams
from .errors import ConfigurationError, DataIOError
from .harness import MonteCarloConfig
from .iv import SelectionConfig

SECTIONS = {"seed", "dgp", "ensemble", "selection", "harness", "diagnostic", "peripheral", "data", "bootstrap"}
DIAGNOSTIC_KEYS = {"permutations", "alpha", "fraction"}
PERIPHERAL_KEYS = {"sigmas", "reps", "permutations", "alpha", "n_total", "split", "experiment"}
DATA_KEYS = {"labeled", "unlabeled", "schema", "family", "crossfit"}
BOOTSTRAP_KEYS = {"replicates"}


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise DataIOError(f"{path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    for name, keys in (("diagnostic", DIAGNOSTIC_KEYS), ("peripheral", PERIPHERAL_KEYS), ("data", DATA_KEYS),
                       ("bootstrap", BOOTSTRAP_KEYS)):
        extra = set(raw.get(name) or {}) - keys
        if extra:
            raise ConfigurationError(f"unknown keys in {name!r}: {sorted(extra)}")
    return raw


def _build(cls, values, section):
    values = dict(values or {})
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(values) - names
    if extra:
        raise ConfigurationError(f"unknown keys in {section!r}: {sorted(extra)}")
    for key, value in values.items():
        if isinstance(value, list):
            values[key] = tuple(value)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"{section}: {exc}") from exc


def ensemble_params(cfg: dict) -> EnsembleParams:
    return _build(EnsembleParams, cfg.get("ensemble"), "ensemble")


def selections(cfg: dict) -> tuple[SelectionConfig, ...]:
    sel = cfg.get("selection")
    if sel is None:
        return (SelectionConfig(),)
    if isinstance(sel, dict):
        sel = [sel]
    return tuple(_build(SelectionConfig, s, "selection") for s in sel)


def monte_carlo_config(cfg: dict, seed: int | None = None) -> MonteCarloConfig:
    harness = dict(cfg.get("harness") or {})
    allowed = {"reps", "k", "estimators", "subset_size", "subset_draws"}
    extra = set(harness) - allowed
    if extra:
        raise ConfigurationError(f"unknown keys in 'harness': {sorted(extra)}")
    if "estimators" in harness:
        harness["estimators"] = tuple(harness["estimators"])
    return MonteCarloConfig(
        dgp=_build(MainDgpConfig, cfg.get("dgp"), "dgp"),
        ensemble=ensemble_params(cfg),
        selections=selections(cfg),
        seed=int(seed if seed is not None else cfg.get("seed", 0)),
        **harness,
    )
