"""Accuracy and statistical-parity metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import GroupSizeError, ShapeError


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    if pred.size != target.size or pred.size == 0:
        raise ShapeError(f"mse needs equal non-empty lengths, got {pred.size} and {target.size}")
    return float(np.mean((pred - target) ** 2))


def ks_distance(a, b) -> float:
    """Exact two-sample Kolmogorov-Smirnov statistic.

    Both empirical CDFs are evaluated at every pooled sample point (they only
    jump there), so the supremum is attained on that set.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise GroupSizeError("ks_distance needs two non-empty samples")
    pooled = np.concatenate([a, b])
    Fa = np.searchsorted(a, pooled, side="right") / a.size
    Fb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(Fa - Fb)))


def bin_edges(values, bins: int):
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.array([lo - 0.5, lo + 0.5])
    return np.linspace(lo, hi, bins + 1)


def _hist(values, edges):
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, edges.size - 2)
    return np.bincount(idx, minlength=edges.size - 1) / max(values.size, 1)


def ks_binned(a, b, bins: int, edges=None) -> float:
    """KS between histogram CDFs on shared bins over the pooled range."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise GroupSizeError("ks_binned needs two non-empty samples")
    if edges is None:
        edges = bin_edges(np.concatenate([a, b]), bins)
    return float(np.max(np.abs(np.cumsum(_hist(a, edges)) - np.cumsum(_hist(b, edges)))))


def group_ks(pred, groups, mode: str = "exact", bins: int = 36) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    groups = np.asarray(groups).ravel()
    a, b = pred[groups == 1], pred[groups == 2]
    return ks_distance(a, b) if mode == "exact" else ks_binned(a, b, bins)


@dataclass
class Densities:
    edges: np.ndarray
    group1: np.ndarray
    group2: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "group1_mass", "group2_mass"])
        for i in range(self.group1.size):
            w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                        repr(float(self.group1[i])), repr(float(self.group2[i]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "group1": self.group1.tolist(),
                "group2": self.group2.tolist()}


def density_export(pred, groups, bins: int = 36) -> Densities:
    """Per-group normalised histograms on shared edges spanning the pooled range.

    A constant prediction vector collapses to a single bin.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    pred = np.asarray(pred, dtype=float).ravel()
    groups = np.asarray(groups).ravel()
    a, b = pred[groups == 1], pred[groups == 2]
    if a.size == 0 or b.size == 0:
        raise GroupSizeError("density_export needs both groups")
    edges = bin_edges(pred, bins)
    return Densities(edges, _hist(a, edges), _hist(b, edges))


@dataclass
class EvaluationReport:
    method: str
    mse: float
    ks: float
    n_group1: int
    n_group2: int
    densities: Densities
    ks_mode: str = "exact"
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"method": self.method, "mse": self.mse, "ks": self.ks, "ks_mode": self.ks_mode,
                "n_group1": self.n_group1, "n_group2": self.n_group2,
                "densities": self.densities.to_dict(), "metadata": self.metadata}


def evaluate(pred, y, groups, method: str = "", ks_mode: str = "exact", bins: int = 36,
             **metadata) -> EvaluationReport:
    groups = np.asarray(groups).ravel()
    return EvaluationReport(
        method=method,
        mse=mse(pred, y),
        ks=group_ks(pred, groups, ks_mode, bins),
        n_group1=int(np.count_nonzero(groups == 1)),
        n_group2=int(np.count_nonzero(groups == 2)),
        densities=density_export(pred, groups, bins),
        ks_mode=ks_mode,
        metadata=metadata,
    )
