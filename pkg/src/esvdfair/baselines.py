"""Wasserstein-barycenter post-processing baselines.

Both methods need the group label at prediction time; at test time it comes
from a separately trained attribute predictor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression

from .errors import ConfigError, GroupSizeError
from .evaluation import bin_edges
from .model import MLP, TrainConfig, train


class EmpiricalCDF:
    """Right-continuous empirical CDF with the generalized-inverse quantile."""

    def __init__(self, values):
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 0:
            raise GroupSizeError("EmpiricalCDF needs at least one value")
        self.values = np.sort(values, kind="stable")

    @property
    def n(self) -> int:
        return self.values.size

    def __call__(self, v):
        return np.searchsorted(self.values, v, side="right") / self.n

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        idx = np.ceil(p * self.n - 1e-12).astype(int) - 1
        return self.values[np.clip(idx, 0, self.n - 1)]

    def to_dict(self) -> dict:
        return {"values": self.values.tolist()}


@dataclass
class QuantileMatcher:
    cdfs: dict
    weights: dict
    mode: str = "mixture"

    def predict(self, f_out, groups):
        f_out = np.asarray(f_out, dtype=float).ravel()
        groups = np.asarray(groups).ravel()
        out = np.empty_like(f_out)
        for a in (1, 2):
            sel = groups == a
            if not np.any(sel):
                continue
            level = self.cdfs[a](f_out[sel])
            if self.mode == "mixture":
                out[sel] = sum(self.weights[b] * self.cdfs[b].quantile(level) for b in (1, 2))
            else:
                other = 3 - a
                out[sel] = self.weights[other] * self.cdfs[other].quantile(level)
        return out

    def to_dict(self) -> dict:
        return {"mode": self.mode, "weights": {str(k): v for k, v in self.weights.items()},
                "cdfs": {str(k): c.to_dict() for k, c in self.cdfs.items()}}


def fit_quantile_matcher(f_out, groups, mode: str = "mixture") -> QuantileMatcher:
    """Fit per-group CDFs and group weights on calibration outputs.

    ``mode="mixture"`` maps a group-``a`` output ``v`` to
    ``sum_b p_b Q_b(F_a(v))``; ``mode="as-printed"`` keeps only the cross-group
    term ``p_b Q_b(F_a(v))`` with ``b != a``.
    """
    if mode not in ("mixture", "as-printed"):
        raise ConfigError("mode must be 'mixture' or 'as-printed'")
    f_out = np.asarray(f_out, dtype=float).ravel()
    groups = np.asarray(groups).ravel()
    cdfs, weights = {}, {}
    for a in (1, 2):
        sel = groups == a
        if not np.any(sel):
            raise GroupSizeError(f"group {a} absent from calibration data")
        cdfs[a] = EmpiricalCDF(f_out[sel])
        weights[a] = float(np.mean(sel))
    return QuantileMatcher(cdfs, weights, mode)


def quantile_match_predict(f_out, groups, matcher: QuantileMatcher):
    return matcher.predict(f_out, groups)


@dataclass
class DiscretizedTransport:
    edges: np.ndarray
    centers: np.ndarray
    maps: dict
    masses: dict
    weights: dict

    def discretize(self, f_out):
        f_out = np.asarray(f_out, dtype=float).ravel()
        idx = np.searchsorted(self.edges, f_out, side="right") - 1
        return np.clip(idx, 0, self.centers.size - 1)

    def predict(self, f_out, groups):
        groups = np.asarray(groups).ravel()
        idx = self.discretize(f_out)
        out = np.empty(idx.size)
        for a in (1, 2):
            sel = groups == a
            out[sel] = self.maps[a][idx[sel]]
        return out

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "centers": self.centers.tolist(),
                "maps": {str(a): m.tolist() for a, m in self.maps.items()},
                "masses": {str(a): m.tolist() for a, m in self.masses.items()},
                "weights": {str(a): w for a, w in self.weights.items()}}


def _discrete_quantile(centers, cum, tau):
    idx = np.searchsorted(cum, tau - 1e-12, side="left")
    return centers[np.clip(idx, 0, centers.size - 1)]


def barycenter_transport_fit(f_out, groups, bins: int = 36) -> DiscretizedTransport:
    """Histogram both groups on shared bins and map each onto the barycenter.

    In one dimension the barycenter's quantile function is the weighted mean
    of the group quantile functions. Group ``a``'s bin ``j`` is sent to the
    barycenter quantile at the midpoint of the cumulative mass the bin covers,
    which is the monotone (optimal) deterministic transport.
    """
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    f_out = np.asarray(f_out, dtype=float).ravel()
    groups = np.asarray(groups).ravel()
    if not (np.any(groups == 1) and np.any(groups == 2)):
        raise GroupSizeError("both groups are needed to fit the transport")
    lo, hi = float(f_out.min()), float(f_out.max())
    weights = {a: float(np.mean(groups == a)) for a in (1, 2)}
    if hi <= lo:
        edges = bin_edges(f_out, bins)
        centers = 0.5 * (edges[:-1] + edges[1:])
        ident = {a: centers.copy() for a in (1, 2)}
        return DiscretizedTransport(edges, centers, ident, {a: np.eye(1)[0] for a in (1, 2)},
                                    weights)
    edges = np.linspace(lo, hi, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    masses, cums = {}, {}
    for a in (1, 2):
        vals = f_out[groups == a]
        idx = np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, bins - 1)
        masses[a] = np.bincount(idx, minlength=bins) / vals.size
        cums[a] = np.cumsum(masses[a])
        cums[a][-1] = 1.0
    maps = {}
    for a in (1, 2):
        left = np.concatenate([[0.0], cums[a][:-1]])
        tau = 0.5 * (left + cums[a])
        bary = sum(weights[b] * _discrete_quantile(centers, cums[b], tau) for b in (1, 2))
        # empty bins never carry mass; keep the map monotone through them
        maps[a] = np.maximum.accumulate(bary)
    return DiscretizedTransport(edges, centers, maps, masses, weights)


def barycenter_transport_predict(transport: DiscretizedTransport, f_out, groups):
    return transport.predict(f_out, groups)


class AttributePredictor:
    """Predicts the group label (1 or 2) from features."""

    def __init__(self, kind: str, estimator):
        self.kind = kind
        self.estimator = estimator

    def predict_proba2(self, X):
        if self.kind == "logistic":
            return self.estimator.predict_proba(X)[:, 1]
        if self.kind == "constant":
            return np.full(np.asarray(X).shape[0], self.estimator)
        logits = self.estimator.forward(X)
        return 1.0 / (1.0 + np.exp(-logits))

    def predict(self, X):
        return np.where(self.predict_proba2(X) >= 0.5, 2, 1)


def fit_attribute_predictor(X, groups, kind: str = "logistic", seed: int = 0,
                            hidden=(256, 256, 256, 256), epochs: int = 20) -> AttributePredictor:
    X = np.asarray(X, dtype=float)
    groups = np.asarray(groups).ravel()
    labels = set(np.unique(groups).tolist())
    if labels != {1, 2}:
        raise GroupSizeError("attribute predictor needs both groups present")
    target = (groups == 2).astype(float)
    if np.allclose(X, X[0]):
        # nothing to learn from: predict the majority group
        return AttributePredictor("constant", float(target.mean() >= 0.5))
    if kind == "logistic":
        clf = LogisticRegression(max_iter=1000, random_state=seed)
        clf.fit(X, target)
        return AttributePredictor("logistic", clf)
    if kind == "mlp-sigmoid":
        net = MLP.init(X.shape[1], hidden, 1, seed=seed)
        train(net, X, target, TrainConfig(epochs=epochs, seed=seed, loss="bce"))
        return AttributePredictor("mlp-sigmoid", net)
    raise ConfigError(f"unknown attribute predictor kind {kind!r}")
