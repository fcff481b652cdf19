"""Tabular data with a binary sensitive attribute.

Group labels are always stored as 1 and 2. Features are never z-scored in
place; :func:`standardize` returns a copy normalised with training-split
statistics.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .errors import GroupSizeError, SchemaError

log = logging.getLogger(__name__)

SPLIT_RATIOS = (0.70, 0.15, 0.15)

# Law School layout used in the experiments: race is the sensitive attribute,
# ugpa the target, the rest are features.
LAW_SCHOOL_SCHEMA = {
    "features": ["dnn_bar_pass_prediction", "gender", "lsat", "pass_bar"],
    "target": "ugpa",
    "group": "race",
    "group_values": {"Black": 1, "White": 2},
    "categorical": {"gender": {"female": 0, "male": 1}},
}


@dataclass
class GroupedDataset:
    X: np.ndarray
    y: np.ndarray
    A: np.ndarray
    columns: list
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    dropped_rows: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.A = np.asarray(self.A, dtype=int).ravel()
        if not (self.X.shape[0] == self.y.size == self.A.size):
            raise SchemaError("X, y and A lengths differ")
        if not np.isin(self.A, (1, 2)).all():
            raise SchemaError("group labels must be 1 or 2")
        for g in (1, 2):
            if np.count_nonzero(self.A == g) < 2:
                raise GroupSizeError(f"group {g} has fewer than 2 rows")

    def __len__(self):
        return self.y.size

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": self.train.tolist(),
                "val": self.val.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_dict(cls, d) -> "SplitIndices":
        return cls(np.asarray(d["train"], dtype=int), np.asarray(d["val"], dtype=int),
                   np.asarray(d["test"], dtype=int), int(d["seed"]))


def _encode(col: pd.Series, name: str, mapping: Optional[dict]) -> np.ndarray:
    if mapping is not None:
        keys = col.astype(str)
        unknown = set(keys.unique()) - set(map(str, mapping))
        if unknown:
            raise SchemaError(f"column {name!r} has unmapped values {sorted(unknown)}")
        return keys.map({str(k): v for k, v in mapping.items()}).to_numpy(dtype=float)
    if pd.api.types.is_numeric_dtype(col):
        return col.to_numpy(dtype=float)
    if pd.api.types.is_bool_dtype(col):
        return col.astype(float).to_numpy()
    values = sorted(col.astype(str).unique())
    if len(values) != 2:
        raise SchemaError(f"column {name!r} is non-numeric with {len(values)} levels; "
                          "declare an encoding under 'categorical'")
    return (col.astype(str) == values[1]).to_numpy(dtype=float)


def load_csv(path, schema: dict) -> GroupedDataset:
    """Read a CSV and apply ``schema``.

    ``schema`` keys: ``features`` (list), ``target``, ``group``,
    ``group_values`` (mapping of raw value -> 1 or 2; rows with other values
    are discarded) and optionally ``categorical`` (column -> value -> code).
    Rows missing any declared field are dropped and counted.
    """
    path = Path(path)
    df = pd.read_csv(path, encoding="utf-8")
    features = list(schema["features"])
    target, group = schema["target"], schema["group"]
    needed = features + [target, group]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise SchemaError(f"{path.name}: missing columns {missing}")
    df = df[needed]
    n0 = len(df)
    df = df.dropna()
    gmap = schema.get("group_values")
    if gmap is None:
        levels = sorted(df[group].astype(str).unique())
        if len(levels) != 2:
            raise SchemaError(f"group column {group!r} has {len(levels)} levels; give group_values")
        gmap = {levels[0]: 1, levels[1]: 2}
    if sorted(set(gmap.values())) != [1, 2]:
        raise SchemaError("group_values must map onto exactly {1, 2}")
    keys = df[group].astype(str)
    keep = keys.isin([str(k) for k in gmap])
    df = df[keep]
    dropped = n0 - len(df)
    if dropped:
        log.info("%s: dropped %d of %d rows (missing values or other groups)", path.name, dropped, n0)
    cats = schema.get("categorical", {})
    X = np.column_stack([_encode(df[c], c, cats.get(c)) for c in features]) if features \
        else np.empty((len(df), 0))
    y = _encode(df[target], target, cats.get(target))
    A = df[group].astype(str).map({str(k): v for k, v in gmap.items()}).to_numpy(dtype=int)
    return GroupedDataset(X, y, A, features, dropped_rows=dropped, meta={"source": str(path)})


def make_gaussian_groups(n: int = 4000, dim: int = 8, seed: int = 0, p1: float = 0.4,
                         shift: float = 1.0, noise: float = 0.1) -> GroupedDataset:
    """Two Gaussian groups with different means and covariances.

    The target is a smooth nonlinear function of the features, so a predictor
    fitted to it inherits the group disparity through the features alone.
    """
    rng = np.random.default_rng(seed)
    A = np.where(rng.random(n) < p1, 1, 2)
    n1 = int(np.count_nonzero(A == 1))
    mu1 = np.zeros(dim)
    mu2 = shift * rng.normal(size=dim) / np.sqrt(dim) * 2.0
    B1 = rng.normal(size=(dim, dim)) / np.sqrt(dim)
    B2 = rng.normal(size=(dim, dim)) / np.sqrt(dim) * 1.5
    X = np.empty((n, dim))
    X[A == 1] = mu1 + rng.normal(size=(n1, dim)) @ B1.T
    X[A == 2] = mu2 + rng.normal(size=(n - n1, dim)) @ B2.T
    w = rng.normal(size=dim) / np.sqrt(dim)
    v = rng.normal(size=dim) / np.sqrt(dim)
    y = X @ w + 0.5 * np.tanh(X @ v) + 0.25 * (X @ v) ** 2 + noise * rng.normal(size=n)
    cols = [f"x{i}" for i in range(dim)]
    return GroupedDataset(X, y, A, cols, meta={"source": "synthetic-gaussian", "seed": seed})


def split(ds: GroupedDataset, seed: int, ratios=SPLIT_RATIOS) -> SplitIndices:
    n = len(ds)
    if n < 20:
        raise GroupSizeError("need at least 20 rows to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return SplitIndices(np.sort(order[:n_train]), np.sort(order[n_train:n_train + n_val]),
                        np.sort(order[n_train + n_val:]), seed)


def standardize(ds: GroupedDataset, train_idx) -> GroupedDataset:
    """Copy of ``ds`` with features z-scored by training-row statistics."""
    Xt = ds.X[np.asarray(train_idx)]
    mean = Xt.mean(axis=0)
    std = Xt.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return replace(ds, X=(ds.X - mean) / std, mean=mean, std=std)


def partition_by_group(ds: GroupedDataset, indices=None):
    """``(X1, X2, y1, y2)`` restricted to ``indices`` (all rows by default)."""
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices, dtype=int)
    A = ds.A[idx]
    i1, i2 = idx[A == 1], idx[A == 2]
    if i1.size == 0 or i2.size == 0:
        raise GroupSizeError("subset is missing one of the groups")
    return ds.X[i1], ds.X[i2], ds.y[i1], ds.y[i2]


def save_split(split_idx: SplitIndices, path) -> None:
    Path(path).write_text(json.dumps(split_idx.to_dict()))
