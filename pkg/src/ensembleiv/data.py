"""Datasets, partitions, folds and CSV ingestion.

Samples are stored column-wise as numpy arrays. Sample identity is the integer
row id assigned at ingestion (or generation) time; partitions are disjoint
exactly when their id sets are.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DataIOError,
    InvalidPartitionError,
    ParseError,
    SchemaError,
    ShapeError,
)
from .rng import RngStream


def _as_2d(a, n):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(n, -1) if a.size else np.empty((n, 0))
    return a


@dataclass(frozen=True, eq=False)
class Samples:
    """Column-wise sample set: features ``V``, label ``X``, outcome ``Y``, controls ``W``."""

    V: np.ndarray
    Y: np.ndarray
    W: np.ndarray
    X: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float).ravel()
        n = Y.shape[0]
        V = _as_2d(self.V, n)
        W = _as_2d(self.W, n)
        X = None if self.X is None else np.asarray(self.X, dtype=float).ravel()
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64).ravel()
        for name, arr in (("V", V), ("W", W), ("ids", ids)) + ((("X", X),) if X is not None else ()):
            if arr.shape[0] != n:
                raise ShapeError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if not (np.isfinite(V).all() and np.isfinite(W).all()):
            raise ConfigurationError("features and controls must be finite")
        if not np.isfinite(Y).all() or (X is not None and not np.isfinite(X).all()):
            raise ConfigurationError("outcome and label must be finite")
        for name, arr in (("V", V), ("Y", Y), ("W", W), ("X", X), ("ids", ids)):
            if arr is not None:
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.Y.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.X is not None

    @property
    def labels_binary(self) -> bool:
        return self.X is not None and bool(np.isin(self.X, (0.0, 1.0)).all())

    def take(self, index) -> "Samples":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return Samples(
            V=self.V[index],
            Y=self.Y[index],
            W=self.W[index],
            X=None if self.X is None else self.X[index],
            ids=self.ids[index],
        )

    def without_labels(self) -> "Samples":
        return Samples(V=self.V, Y=self.Y, W=self.W, X=None, ids=self.ids)

    @staticmethod
    def concat(parts: Sequence["Samples"]) -> "Samples":
        labeled = all(p.has_labels for p in parts)
        return Samples(
            V=np.vstack([p.V for p in parts]),
            Y=np.concatenate([p.Y for p in parts]),
            W=np.vstack([p.W for p in parts]),
            X=np.concatenate([p.X for p in parts]) if labeled else None,
            ids=np.concatenate([p.ids for p in parts]),
        )


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold index in ``1..k`` for every id of a labeled pool."""

    ids: np.ndarray
    folds: np.ndarray
    k: int

    def fold_sizes(self) -> list[int]:
        return [int(np.sum(self.folds == f)) for f in range(1, self.k + 1)]

    def split(self, pool: Samples, fold: int) -> tuple[Samples, Samples]:
        """Return ``(pool minus fold, fold)`` as train/test sample sets."""
        lookup = dict(zip(self.ids.tolist(), self.folds.tolist()))
        in_fold = np.array([lookup[i] == fold for i in pool.ids.tolist()])
        if in_fold.size != len(pool) or len(lookup) != len(pool):
            raise InvalidPartitionError("fold assignment does not cover the pool")
        return pool.take(np.flatnonzero(~in_fold)), pool.take(np.flatnonzero(in_fold))


@dataclass(frozen=True, eq=False)
class PartitionedDataset:
    train: Samples
    test: Samples
    unlabel: Samples
    diagnostic: Samples | None = None
    fold_assignments: FoldAssignment | None = None

    def __post_init__(self):
        for name in ("train", "test", "diagnostic"):
            part = getattr(self, name)
            if part is not None and not part.has_labels:
                raise InvalidPartitionError(f"partition {name!r} must carry labels")
        if len(self.unlabel) < 1:
            raise InvalidPartitionError("unlabeled partition is empty")
        seen: set[int] = set()
        for name, part in self.partitions().items():
            ids = set(part.ids.tolist())
            if len(ids) != len(part) or ids & seen:
                raise InvalidPartitionError(f"partition {name!r} overlaps another partition")
            seen |= ids
        if self.fold_assignments is not None:
            pool = set(self.labeled_pool().ids.tolist())
            if set(self.fold_assignments.ids.tolist()) != pool or self.fold_assignments.k < 2:
                raise InvalidPartitionError("fold assignment must cover the labeled pool with k >= 2")

    def partitions(self) -> dict[str, Samples]:
        parts = {"train": self.train, "test": self.test, "unlabel": self.unlabel}
        if self.diagnostic is not None:
            parts["diagnostic"] = self.diagnostic
        return parts

    def labeled_pool(self) -> Samples:
        return Samples.concat([self.train, self.test])


@dataclass(frozen=True)
class SecondPhaseSpec:
    family: str = "linear"
    mlv_name: str = "mlv"
    control_names: tuple[str, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        if self.family not in ("linear", "logistic"):
            raise ConfigurationError(f"unknown second-phase family {self.family!r}")
        object.__setattr__(self, "control_names", tuple(self.control_names))

    def names(self, n_controls: int) -> list[str]:
        controls = list(self.control_names) or [f"w{k + 1}" for k in range(n_controls)]
        if len(controls) != n_controls:
            raise ShapeError(f"{len(controls)} control names for {n_controls} control columns")
        return (["intercept"] if self.intercept else []) + [self.mlv_name] + controls

    def check_outcome(self, y) -> None:
        if self.family == "logistic" and not np.isin(y, (0.0, 1.0)).all():
            raise ConfigurationError("logistic second phase requires a 0/1 outcome")


def partition_labeled(pool: Samples, k: int, rng: RngStream) -> FoldAssignment:
    """Randomly assign the labeled pool to ``k`` folds whose sizes differ by at most one."""
    n = len(pool)
    if k < 2:
        raise InvalidPartitionError("need at least two folds")
    if k > n:
        raise InvalidPartitionError(f"fold count {k} exceeds pool size {n}")
    if n < 2 * k:
        raise InvalidPartitionError(f"pool of {n} is too small for {k} folds (need {2 * k})")
    order = rng.generator().permutation(n)
    folds = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(order, k), start=1):
        folds[chunk] = f
    return FoldAssignment(ids=pool.ids.copy(), folds=folds, k=k)


def random_split(samples: Samples, sizes: Sequence[int], rng: RngStream) -> list[Samples]:
    """Split into consecutive random chunks of the given sizes (simple random split)."""
    if sum(sizes) != len(samples) or min(sizes) < 0:
        raise InvalidPartitionError(f"split sizes {list(sizes)} do not sum to {len(samples)}")
    order = rng.generator().permutation(len(samples))
    bounds = np.cumsum([0, *sizes])
    return [samples.take(np.sort(order[a:b])) for a, b in zip(bounds[:-1], bounds[1:])]


def fraction_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer sizes proportional to ``fractions``; the remainder goes to the last part."""
    sizes = [int(round(n * f)) for f in fractions[:-1]]
    return sizes + [n - sum(sizes)]


# ---------------------------------------------------------------------------
# CSV ingestion

_ROLES = ("y", "x", "w", "v")


@dataclass(frozen=True)
class ColumnSchema:
    y: str
    x: str | None = None
    w: tuple[str, ...] = ()
    v: tuple[str, ...] = field(default_factory=tuple)


def parse_schema(text: str) -> ColumnSchema:
    """Parse ``y=<col>,x=<col>,w=<col,...>,v=<col,...>``.

    A bare token continues the list of the most recent role, so
    ``w=a,b,v=c`` assigns controls ``a, b`` and feature ``c``.
    """
    roles: dict[str, list[str]] = {}
    current = None
    for token in (t.strip() for t in text.split(",")):
        if not token:
            continue
        if "=" in token:
            current, _, col = token.partition("=")
            current = current.strip().lower()
            if current not in _ROLES:
                raise SchemaError(f"unknown column role {current!r}")
            if current in roles:
                raise SchemaError(f"role {current!r} given twice")
            roles[current] = [col.strip()] if col.strip() else []
        elif current is None:
            raise SchemaError(f"column {token!r} has no role")
        else:
            roles[current].append(token)
    return schema_from_mapping(roles)


def schema_from_mapping(roles: Mapping[str, object]) -> ColumnSchema:
    def listed(value):
        if value is None:
            return ()
        if isinstance(value, str):
            return (value,)
        return tuple(value)

    y = listed(roles.get("y"))
    if len(y) != 1:
        raise SchemaError("schema must name exactly one outcome column (y=...)")
    x = listed(roles.get("x"))
    if len(x) > 1:
        raise SchemaError("at most one label column (x=...)")
    return ColumnSchema(y=y[0], x=x[0] if x else None, w=listed(roles.get("w")), v=listed(roles.get("v")))


def ingest_csv(path, schema: ColumnSchema | str, *, id_offset: int = 0) -> Samples:
    """Read a header-bearing CSV into :class:`Samples`.

    Empty cells are rejected, not imputed. ``ParseError.row`` is the 1-based
    data-row number (the header is row 0).
    """
    if isinstance(schema, str):
        schema = parse_schema(schema)
    if not os.path.exists(path):
        raise DataIOError(f"{path}: no such file")
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise ParseError(f"{path}: empty file (header row required)", row=0) from None
            rows = list(reader)
    except OSError as exc:
        raise DataIOError(f"{path}: {exc}") from exc

    index = {name: k for k, name in enumerate(header)}
    if schema.y not in index:
        raise SchemaError(f"{path}: outcome column {schema.y!r} not in header")
    wanted = [schema.y] + ([schema.x] if schema.x else []) + list(schema.w) + list(schema.v)
    for col in wanted:
        if col not in index:
            raise SchemaError(f"{path}: column {col!r} not in header")

    values = np.empty((len(rows), len(wanted)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}", row=r)
        for c, col in enumerate(wanted):
            cell = row[index[col]].strip()
            try:
                values[r - 1, c] = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: row {r}, column {col!r}: cannot parse {cell!r} as a number", row=r, column=col
                ) from None
            if not np.isfinite(values[r - 1, c]):
                raise ParseError(f"{path}: row {r}, column {col!r}: non-finite value", row=r, column=col)

    pos = 1
    X = None
    if schema.x:
        X = values[:, 1]
        pos = 2
    W = values[:, pos:pos + len(schema.w)]
    V = values[:, pos + len(schema.w):]
    return Samples(V=V, Y=values[:, 0], W=W, X=X, ids=np.arange(len(rows)) + id_offset)
