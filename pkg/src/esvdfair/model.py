"""Bias-free ReLU multilayer perceptron in plain numpy.

Weights follow the out-by-in convention: layer ``l`` maps ``X^[l]`` to
``X^[l] @ W[l].T``. ReLU sits between layers, the last layer is linear.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError, SingularityError
from .numerics import RANK_TOL, as_matrix

DEFAULT_HIDDEN = (256, 256, 256, 256)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    decay: float = 0.8
    batch_size: int = 256
    seed: int = 0
    loss: str = "mse"  # "bce" trains a sigmoid classifier head on 0/1 targets
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.loss not in ("mse", "bce"):
            raise ConfigError("loss must be 'mse' or 'bce'")


class MLP:
    def __init__(self, layers: Sequence[np.ndarray]):
        self.layers = [np.array(W, dtype=float) for W in layers]
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if b.shape[1] != a.shape[0]:
                raise ShapeError(f"layer shapes {a.shape} -> {b.shape} do not chain")

    @classmethod
    def init(cls, n_in: int, hidden: Sequence[int] = DEFAULT_HIDDEN, n_out: int = 1,
             seed: int = 0) -> "MLP":
        rng = np.random.default_rng(seed)
        sizes = [n_in, *hidden, n_out]
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            layers.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        return cls(layers)

    def copy(self) -> "MLP":
        return MLP([W.copy() for W in self.layers])

    @property
    def n_in(self) -> int:
        return self.layers[0].shape[1]

    def forward(self, X, capture: bool = False):
        """Predictions of shape (N,), plus every layer's input when ``capture``."""
        X = as_matrix(X, "X")
        if X.shape[1] != self.n_in:
            raise ShapeError(f"expected {self.n_in} features, got {X.shape[1]}")
        inputs = []
        h = X
        last = len(self.layers) - 1
        for i, W in enumerate(self.layers):
            if capture:
                inputs.append(h)
            h = h @ W.T
            if i < last:
                h = np.maximum(h, 0.0)
        out = h[:, 0] if h.shape[1] == 1 else h
        return (out, inputs) if capture else out

    __call__ = forward

    def layer_input(self, X, index: int) -> np.ndarray:
        """Input to layer ``index`` (0-based); index 0 is ``X`` itself."""
        h = as_matrix(X, "X")
        for W in self.layers[:index]:
            h = np.maximum(h @ W.T, 0.0)
        return h

    def gradients(self, X, y, loss: str = "mse"):
        """Mean loss and its gradient with respect to every weight matrix."""
        X = as_matrix(X, "X")
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        acts = [X]
        pre = []
        h = X
        last = len(self.layers) - 1
        for i, W in enumerate(self.layers):
            z = h @ W.T
            pre.append(z)
            h = np.maximum(z, 0.0) if i < last else z
            acts.append(h)
        out = acts[-1]
        n = X.shape[0]
        if loss == "mse":
            r = out - y
            value = float(np.mean(r ** 2))
            delta = 2.0 * r / n
        else:
            p = 1.0 / (1.0 + np.exp(-out))
            value = float(np.mean(np.logaddexp(0.0, out) - y * out))
            delta = (p - y) / n
        grads = [None] * len(self.layers)
        for i in range(last, -1, -1):
            grads[i] = delta.T @ acts[i]
            if i > 0:
                delta = (delta @ self.layers[i]) * (pre[i - 1] > 0)
        return value, grads

    def to_dict(self, **metadata) -> dict:
        return {
            "format": "esvdfair.mlp/1",
            "shapes": [list(W.shape) for W in self.layers],
            "weights": [W.ravel().tolist() for W in self.layers],
            "metadata": metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        layers = [np.asarray(w, dtype=float).reshape(shape)
                  for w, shape in zip(d["weights"], d["shapes"])]
        return cls(layers)

    def digest(self) -> str:
        h = hashlib.sha256()
        for W in self.layers:
            h.update(np.ascontiguousarray(W).tobytes())
        return h.hexdigest()[:16]


def mse_loss(model: MLP, X, y) -> float:
    pred = model.forward(X)
    return float(np.mean((pred - np.asarray(y, dtype=float).ravel()) ** 2))


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    size = min(batch_size, n)
    for start in range(0, n, size):
        yield order[start:start + size]


def train(model: MLP, X, y, cfg: Optional[TrainConfig] = None, trainable=None):
    """Minibatch Adam with per-epoch learning-rate decay.

    Trains ``model`` in place and returns ``(model, per-epoch mean loss)``.
    ``trainable`` restricts updates to the listed layer indices.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    X = as_matrix(X, "X")
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ShapeError("X and y have different lengths")
    idx = list(range(len(model.layers))) if trainable is None else list(trainable)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam([model.layers[i].shape for i in idx], cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    trace = []
    for _ in range(cfg.epochs):
        total = 0.0
        for b in _batches(X.shape[0], cfg.batch_size, rng):
            value, grads = model.gradients(X[b], y[b], cfg.loss)
            if not math.isfinite(value):
                raise DivergenceError("loss became non-finite")
            opt.step([model.layers[i] for i in idx], [grads[i] for i in idx])
            total += value * b.size
        trace.append(total / X.shape[0])
        opt.lr *= cfg.decay
    return model, trace


def least_squares_refit(XL, y, fallback: bool = True) -> np.ndarray:
    """Output-layer weights ``(1, n)`` minimising ``||XL w - y||^2``.

    Rank-deficient ``XL`` (dead ReLU units are common) is handled by a tiny
    ridge term ``1e-8 * trace(XL^T XL) / n`` unless ``fallback`` is off.
    """
    XL = as_matrix(XL, "XL")
    y = np.asarray(y, dtype=float).ravel()
    if XL.shape[0] != y.size:
        raise ShapeError("XL and y have different lengths")
    s = np.linalg.svd(XL, compute_uv=False)
    full_rank = s.size == XL.shape[1] and s[0] > 0 and s[-1] > RANK_TOL * s[0]
    if full_rank:
        w, *_ = np.linalg.lstsq(XL, y, rcond=None)
        return w[None, :]
    if not fallback:
        raise SingularityError("layer input is rank-deficient")
    G = XL.T @ XL
    lam = 1e-8 * np.trace(G) / XL.shape[1]
    if lam == 0.0:
        return np.zeros((1, XL.shape[1]))
    w = np.linalg.solve(G + lam * np.eye(XL.shape[1]), XL.T @ y)
    return w[None, :]


def fine_tune_last_layer(model: MLP, X, y, epochs: int = 50, lr: float = 1e-3,
                         batch_size: int = 256, seed: int = 0):
    """Adam on the output layer only; the hidden layers are left bit-identical."""
    new = model.copy()
    cfg = TrainConfig(epochs=epochs, lr=lr, decay=1.0, batch_size=batch_size, seed=seed)
    # output layer is linear in its input, so train it on the frozen features
    XL = new.layer_input(X, len(new.layers) - 1)
    head = MLP([new.layers[-1]])
    _, trace = train(head, XL, y, cfg)
    new.layers[-1] = head.layers[0]
    return new, trace


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")
