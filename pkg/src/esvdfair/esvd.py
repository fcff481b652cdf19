"""Constrained singular-value shrinkage and the layer-rewriting pipeline.

Both solvers minimise ``sum_i k_i (s'_i - s_i)^2`` over the singular values of
a transformed weight matrix ``W S``; the first-moment problem constrains
``sum s'_i^2`` and the second-moment problem constrains ``sum s'_i^4``. The
objective equals ``||X W'^T - X W^T||_F^2`` when ``W' - W`` only moves along the
singular directions of ``W S``, which is how the layer updates are applied.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BracketError, ConfigError, NumericalError, ShapeError, SolverError
from .numerics import RANK_TOL, as_matrix, solve_monotone_scalar, thin_svd
from .transforms import (
    DEFAULT_EPS_E,
    build_M,
    build_first_moment_transform,
    build_second_moment_transform,
    d_e_squared,
    d_v_squared,
    group_means,
)

log = logging.getLogger(__name__)

MODES = ("algorithm1", "least-squares", "fine-tune")


@dataclass
class ShrinkageSolution:
    sigma: np.ndarray
    sigma_star: np.ndarray
    gamma: float
    k: np.ndarray
    budget: float
    constraint_active: bool
    objective_value: float
    constraint_residual: float
    power: int

    def kkt_residual(self) -> float:
        """Largest stationarity violation of the Lagrangian over all components."""
        s, t, k, g = self.sigma, self.sigma_star, self.k, self.gamma
        if self.power == 2:
            r = 2 * k * t - 2 * k * s + 2 * g * t
        else:
            r = 2 * k * t - 2 * k * s + 4 * g * t ** 3
        # k == 0 components are pinned to zero, outside the stationarity system
        r = np.where(k > 0, r, 0.0)
        return float(np.max(np.abs(r), initial=0.0))

    def to_dict(self) -> dict:
        return {
            "power": self.power,
            "gamma": self.gamma,
            "budget": self.budget,
            "constraint_active": self.constraint_active,
            "objective_value": self.objective_value,
            "constraint_residual": self.constraint_residual,
            "sigma_before": self.sigma.tolist(),
            "sigma_after": self.sigma_star.tolist(),
        }


@dataclass
class FairnessConfig:
    ce_tilde: float = 15.0
    cv_tilde: float = 150.0
    eps_e: float = DEFAULT_EPS_E
    layer: int = -2
    mode: str = "fine-tune"
    fine_tune_epochs: int = 50
    fine_tune_lr: float = 1e-3

    def validate(self, n_layers: Optional[int] = None) -> None:
        if not self.ce_tilde > 0 or not self.cv_tilde > 0:
            raise ConfigError("ce_tilde and cv_tilde must be positive")
        if not self.eps_e > 0:
            raise ConfigError("eps_e must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if n_layers is not None:
            idx = self.layer if self.layer >= 0 else n_layers + self.layer
            if not 0 <= idx < n_layers - 1:
                raise ConfigError(
                    f"layer {self.layer} is not a hidden layer of a {n_layers}-layer model"
                )


def curvature_coefficients(X, S_inv, V) -> np.ndarray:
    """``k_i = || X S^{-T} v_i ||^2`` for every right singular vector ``v_i``."""
    X = as_matrix(X, "X")
    S_inv = as_matrix(S_inv, "S_inv")
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if X.shape[1] != S_inv.shape[1] or S_inv.shape[0] != V.shape[0]:
        raise ShapeError(f"incompatible shapes X{X.shape}, S_inv{S_inv.shape}, V{V.shape}")
    B = X @ (S_inv.T @ V)
    return np.einsum("ij,ij->j", B, B)


def _objective(sigma, sigma_star, k):
    return float(np.sum(k * (sigma_star - sigma) ** 2))


def solve_first_moment(sigma, k, budget: float) -> ShrinkageSolution:
    """Minimise ``sum k_i (s'_i - s_i)^2`` subject to ``sum s'_i^2 <= budget``.

    Active solutions have the form ``s'_i = s_i k_i / (k_i + gamma)`` with
    ``gamma > 0`` chosen so the budget is met with equality.
    """
    sigma = np.asarray(sigma, dtype=float).ravel()
    k = np.asarray(k, dtype=float).ravel()
    if sigma.shape != k.shape:
        raise ShapeError("sigma and k differ in length")
    if np.any(sigma < 0) or np.any(k < 0) or not budget > 0:
        raise ValueError("need sigma >= 0, k >= 0 and budget > 0")

    total = float(np.sum(sigma ** 2))
    if total <= budget:
        return ShrinkageSolution(sigma, sigma.copy(), 0.0, k, budget, False, 0.0,
                                 total - budget, 2)

    free = k > 0
    base = np.where(free, sigma, 0.0)
    if float(np.sum(base ** 2)) <= budget:
        return ShrinkageSolution(sigma, base, 0.0, k, budget, False,
                                 _objective(sigma, base, k), float(np.sum(base ** 2)) - budget, 2)

    sk = base * k

    def shrunk(g):
        return np.divide(sk, k + g, out=np.zeros_like(sk), where=free)

    def f(g):
        return float(np.sum(shrunk(g) ** 2)) / budget - 1.0

    def fprime(g):
        t = shrunk(g)
        dt = np.divide(-t, k + g, out=np.zeros_like(t), where=free)
        return float(np.sum(2 * t * dt)) / budget

    hi = float(k[free].max()) * (math.sqrt(float(np.sum(base ** 2)) / budget) - 1.0)
    hi = max(hi, np.finfo(float).tiny)
    for _ in range(2100):
        if f(hi) <= 0:
            break
        hi *= 2.0
    else:
        raise SolverError("could not bracket the first-moment multiplier")
    try:
        gamma = solve_monotone_scalar(f, 0.0, hi, tol=1e-14, fprime=fprime, xtol=0.0, maxiter=400)
    except BracketError as exc:
        raise SolverError(str(exc)) from exc
    star = shrunk(gamma)
    return ShrinkageSolution(sigma, star, float(gamma), k, budget, True,
                             _objective(sigma, star, k), float(np.sum(star ** 2)) - budget, 2)


# --- second moment -----------------------------------------------------------

def cubic_shrink(sigma, k, gamma):
    """Real root of ``2 k s' - 2 k s + 4 gamma s'^3 = 0`` (closed form).

    Cardano's formula for the scaled cubic ``u^3 + a u - a = 0`` with
    ``s' = s u`` and ``a = k / (2 gamma s^2)``, written as a ratio of positive
    terms so no cancellation occurs. Algebraically identical to
    :func:`cubic_shrink_cardano`.
    """
    sigma, k, gamma = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (sigma, k, gamma)))
    out = np.array(sigma, dtype=float, copy=True)
    zero = (k == 0) | (sigma == 0)
    out[zero] = 0.0
    live = ~zero & (gamma > 0)
    if np.any(live):
        with np.errstate(over="ignore", divide="ignore"):
            a = k[live] / (2.0 * gamma[live] * sigma[live] ** 2)
        # for large a the root is 1 - 1/(a+3) + O(a^-3), exact in double precision,
        # and the cube below would overflow
        big = a > 1e8
        u = 1.0 - 1.0 / (a + 3.0)
        ab = a[~big]
        A = np.cbrt(0.5 * ab + np.sqrt(0.25 * ab * ab + ab ** 3 / 27.0))
        u[~big] = ab / (A * A + ab / 3.0 + (ab / (3.0 * A)) ** 2)
        out[live] = sigma[live] * u
    return out if out.ndim else float(out)


def cubic_shrink_cardano(sigma, k, gamma):
    """Cardano's root written with ``phi`` as ``-k/phi + phi/(6 gamma)``.

    ``phi = 6^(1/3) (9 g^2 k s + sqrt(3) sqrt(2 g^3 k^3 + 27 g^4 k^2 s^2))^(1/3)``.
    Loses precision when ``gamma`` is small relative to ``k / sigma^2``; kept
    as a cross-check for :func:`cubic_shrink`.
    """
    sigma, k, gamma = (np.asarray(v, dtype=float) for v in (sigma, k, gamma))
    with np.errstate(all="ignore"):
        inner = 9 * gamma ** 2 * k * sigma + math.sqrt(3) * np.sqrt(
            2 * gamma ** 3 * k ** 3 + 27 * gamma ** 4 * k ** 2 * sigma ** 2)
        phi = 6 ** (1 / 3) * np.cbrt(inner)
        res = -k / phi + phi / (6 * gamma)
    if np.any(~np.isfinite(res)):
        raise NumericalError("closed-form cubic root evaluated outside its real domain")
    return res


def cubic_shrink_bisect(sigma: float, k: float, gamma: float, tol: float = 1e-15) -> float:
    """Bisection on the monotone cubic over ``[0, sigma]``."""
    if k == 0 or sigma == 0:
        return 0.0
    if gamma == 0:
        return float(sigma)
    lo, hi = 0.0, float(sigma)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 2 * k * mid - 2 * k * sigma + 4 * gamma * mid ** 3 > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * sigma:
            break
    return 0.5 * (lo + hi)


def cubic_residual(sigma, k, gamma, s):
    return 2 * k * s - 2 * k * sigma + 4 * gamma * s ** 3


def _shrink_checked(sigma, k, gamma):
    s = cubic_shrink(sigma, k, gamma)
    res = np.abs(cubic_residual(sigma, k, gamma, s))
    bad = res > 1e-9 * np.maximum(k * sigma, 1.0)
    for i in np.flatnonzero(bad):
        s[i] = cubic_shrink_bisect(sigma[i], k[i], gamma)
    return s


def solve_second_moment(sigma, k, budget: float) -> ShrinkageSolution:
    """Minimise ``sum k_i (s'_i - s_i)^2`` subject to ``sum s'_i^4 <= budget``."""
    sigma = np.asarray(sigma, dtype=float).ravel()
    k = np.asarray(k, dtype=float).ravel()
    if sigma.shape != k.shape:
        raise ShapeError("sigma and k differ in length")
    if np.any(sigma < 0) or np.any(k < 0) or not budget > 0:
        raise ValueError("need sigma >= 0, k >= 0 and budget > 0")

    total = float(np.sum(sigma ** 4))
    if total <= budget:
        return ShrinkageSolution(sigma, sigma.copy(), 0.0, k, budget, False, 0.0,
                                 total - budget, 4)

    free = (k > 0) & (sigma > 0)
    base = np.where(free, sigma, 0.0)
    if float(np.sum(base ** 4)) <= budget:
        return ShrinkageSolution(sigma, base, 0.0, k, budget, False,
                                 _objective(sigma, base, k), float(np.sum(base ** 4)) - budget, 4)

    def f(g):
        return float(np.sum(_shrink_checked(base, k, g) ** 4)) / budget - 1.0

    def fprime(g):
        t = _shrink_checked(base, k, g)
        denom = 6 * g * t ** 2 + k
        dt = np.divide(-2 * t ** 3, denom, out=np.zeros_like(t), where=denom > 0)
        return float(np.sum(4 * t ** 3 * dt)) / budget

    # at this gamma every component is at most s_i / rho, so the budget holds
    rho = (float(np.sum(base ** 4)) / budget) ** 0.25
    sf, kf = base[free], k[free]
    hi = float(np.max(kf * (rho - 1.0) * rho ** 2 / (2.0 * sf ** 2)))
    hi = max(hi, np.finfo(float).tiny)
    for _ in range(2100):
        if f(hi) <= 0:
            break
        hi *= 2.0
    else:
        raise SolverError("could not bracket the second-moment multiplier")
    try:
        gamma = solve_monotone_scalar(f, 0.0, hi, tol=1e-14, fprime=fprime, xtol=0.0, maxiter=400)
    except BracketError as exc:
        raise SolverError(str(exc)) from exc
    star = _shrink_checked(base, k, gamma)
    return ShrinkageSolution(sigma, star, float(gamma), k, budget, True,
                             _objective(sigma, star, k), float(np.sum(star ** 4)) - budget, 4)


# --- layer updates -----------------------------------------------------------

@dataclass
class LayerShrinkResult:
    W: np.ndarray
    solution: Optional[ShrinkageSolution]
    skipped: bool = False
    notes: list = field(default_factory=list)


def _apply(W, svd, solution, S_inv):
    delta = (svd.U * (solution.sigma_star - solution.sigma)) @ svd.V.T
    return W + delta @ S_inv


def shrink_layer_first_moment(W, X, mean1, mean2, eps: float = DEFAULT_EPS_E,
                              budget: Optional[float] = None,
                              ce_tilde: Optional[float] = None) -> LayerShrinkResult:
    """Shrink the spectrum of ``W S_e`` so the group output means move closer.

    Give either an absolute ``budget`` on ``sum s'^2`` or a ratio ``ce_tilde``
    (budget = current sum / ce_tilde).
    """
    W = as_matrix(W, "W")
    gap = np.asarray(mean1, dtype=float) - np.asarray(mean2, dtype=float)
    scale = max(np.abs(mean1).max(initial=0.0), np.abs(mean2).max(initial=0.0))
    if np.abs(gap).max(initial=0.0) <= RANK_TOL * scale:
        # the spectrum would only carry eps * tr(W W^T); d_e^2 is already zero
        return LayerShrinkResult(W.copy(), None, skipped=True,
                                 notes=["group means identical; stage skipped"])
    tr = build_first_moment_transform(mean1, mean2, eps)
    svd = thin_svd(W @ tr.S)
    if svd.rank == 0:
        return LayerShrinkResult(W.copy(), None, skipped=True, notes=["W is zero"])
    if budget is None:
        if ce_tilde is None:
            raise ConfigError("need budget or ce_tilde")
        budget = float(np.sum(svd.s ** 2)) / ce_tilde
    k = curvature_coefficients(X, tr.S_inv, svd.V)
    sol = solve_first_moment(svd.s, k, budget)
    if not sol.constraint_active and np.array_equal(sol.sigma_star, sol.sigma):
        return LayerShrinkResult(W.copy(), sol)
    return LayerShrinkResult(_apply(W, svd, sol, tr.S_inv), sol)


def shrink_layer_second_moment(W, X, X1, X2, budget: Optional[float] = None,
                               cv_tilde: Optional[float] = None) -> LayerShrinkResult:
    """Shrink the spectrum of ``W S_v`` so the group output covariances move closer."""
    W = as_matrix(W, "W")
    tr = build_second_moment_transform(build_M(X1, X2))
    if tr.is_zero:
        return LayerShrinkResult(W.copy(), None, skipped=True,
                                 notes=["group covariances identical; stage skipped"])
    svd = thin_svd(W @ tr.S)
    if svd.rank == 0:
        return LayerShrinkResult(W.copy(), None, skipped=True,
                                 notes=["W annihilates the covariance gap"])
    if budget is None:
        if cv_tilde is None:
            raise ConfigError("need budget or cv_tilde")
        budget = float(np.sum(svd.s ** 4)) / cv_tilde
    k = curvature_coefficients(X, tr.S_inv, svd.V)
    sol = solve_second_moment(svd.s, k, budget)
    if not sol.constraint_active and np.array_equal(sol.sigma_star, sol.sigma):
        return LayerShrinkResult(W.copy(), sol)
    return LayerShrinkResult(_apply(W, svd, sol, tr.S_inv), sol)


def _layer_index(model, layer):
    n = len(model.layers)
    idx = layer if layer >= 0 else n + layer
    if not 0 <= idx < n - 1:
        raise ConfigError(f"layer {layer} must be a hidden layer (0 <= l < {n - 1})")
    return idx


def esvdfair_layer(model, layer: int, X1, X2, ce_tilde: float = 15.0, cv_tilde: float = 150.0,
                   eps: float = DEFAULT_EPS_E):
    """Rewrite one hidden layer: covariance shrinkage first, then mean shrinkage.

    ``X1`` and ``X2`` are network inputs for the two groups; the layer inputs
    are captured by a forward pass. Returns ``(new_model, report)``; the input
    model is not modified.
    """
    idx = _layer_index(model, layer)
    X1 = as_matrix(X1, "X1")
    X2 = as_matrix(X2, "X2")
    L1 = model.layer_input(X1, idx)
    L2 = model.layer_input(X2, idx)
    Xl = np.vstack([L1, L2])
    W = model.layers[idx]
    m1, m2 = group_means(L1, L2)

    before = {"d_e_squared": d_e_squared(m1, m2, W), "d_v_squared": d_v_squared(L1, L2, W)}
    second = shrink_layer_second_moment(W, Xl, L1, L2, cv_tilde=cv_tilde)
    first = shrink_layer_first_moment(second.W, Xl, m1, m2, eps, ce_tilde=ce_tilde)
    W_new = first.W
    after = {"d_e_squared": d_e_squared(m1, m2, W_new), "d_v_squared": d_v_squared(L1, L2, W_new)}
    log.debug("layer %d: d_e^2 %.4g -> %.4g, d_v^2 %.4g -> %.4g", idx, before["d_e_squared"],
              after["d_e_squared"], before["d_v_squared"], after["d_v_squared"])

    new = model.copy()
    new.layers[idx] = W_new
    report = {
        "layer": idx,
        "before": before,
        "after": after,
        "second_moment": second.solution.to_dict() if second.solution else None,
        "first_moment": first.solution.to_dict() if first.solution else None,
        "notes": second.notes + first.notes,
    }
    return new, report


def esvdfair_with_adjustment(model, X, y, groups, cfg: FairnessConfig, seed: int = 0):
    """Rewrite ``cfg.layer`` and then re-fit the output layer.

    ``groups`` holds labels in {1, 2}. In ``least-squares`` mode the output
    layer is solved exactly; in ``fine-tune`` mode it is trained by gradient
    steps from its current value; ``algorithm1`` leaves it untouched.
    """
    from .model import fine_tune_last_layer, least_squares_refit

    cfg.validate(len(model.layers))
    X = as_matrix(X, "X")
    y = np.asarray(y, dtype=float).ravel()
    groups = np.asarray(groups).ravel()
    new, report = esvdfair_layer(model, cfg.layer, X[groups == 1], X[groups == 2],
                                 cfg.ce_tilde, cfg.cv_tilde, cfg.eps_e)
    if cfg.mode == "least-squares":
        XL = new.layer_input(X, len(new.layers) - 1)
        new.layers[-1] = least_squares_refit(XL, y)
    elif cfg.mode == "fine-tune":
        new, _ = fine_tune_last_layer(new, X, y, epochs=cfg.fine_tune_epochs,
                                      lr=cfg.fine_tune_lr, seed=seed)
    report["mode"] = cfg.mode
    return new, report
