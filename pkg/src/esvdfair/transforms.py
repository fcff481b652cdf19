"""Explainable transforms for a single linear layer.

For a layer ``Z = X @ W.T`` and two groups of layer inputs ``X1`` and ``X2``:

* ``S_e`` satisfies ``S_e S_e^T = d^T d + eps*I`` with ``d = mean(X1) - mean(X2)``,
  so the squared singular values of ``W S_e`` add up to the squared gap between
  group output means plus ``eps * ||W||_F^2``.
* ``S_v = Q |Lambda|^(1/2)`` where ``Q Lambda Q^T`` is the difference of the
  unbiased group covariances, so the fourth powers of the singular values of
  ``W S_v`` bound the squared Frobenius gap between output covariances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import GroupSizeError, ShapeError
from .numerics import RANK_TOL, as_matrix, cholesky, sym_eig

DEFAULT_EPS_E = 1e-5


@dataclass(frozen=True)
class FirstMomentTransform:
    S: np.ndarray
    S_inv: np.ndarray
    eps: float
    mean1: np.ndarray
    mean2: np.ndarray


@dataclass(frozen=True)
class SecondMomentTransform:
    M: np.ndarray
    Q: np.ndarray
    eigenvalues: np.ndarray
    S: np.ndarray
    S_inv: np.ndarray
    rank: int

    @property
    def abs_M(self) -> np.ndarray:
        return (self.Q * np.abs(self.eigenvalues)) @ self.Q.T

    @property
    def is_zero(self) -> bool:
        return self.rank == 0


def _check_group(X, name, min_rows=1):
    X = as_matrix(X, name)
    if X.shape[0] < min_rows:
        raise GroupSizeError(f"{name} needs at least {min_rows} rows, got {X.shape[0]}")
    return X


def group_means(X1, X2):
    X1 = _check_group(X1, "X1")
    X2 = _check_group(X2, "X2")
    if X1.shape[1] != X2.shape[1]:
        raise ShapeError("groups have different feature counts")
    return X1.mean(axis=0), X2.mean(axis=0)


def build_first_moment_transform(mean1, mean2, eps: float = DEFAULT_EPS_E) -> FirstMomentTransform:
    """Cholesky factor of the rank-one mean-gap Gram matrix plus ``eps * I``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    mean1 = np.asarray(mean1, dtype=float).ravel()
    mean2 = np.asarray(mean2, dtype=float).ravel()
    if mean1.shape != mean2.shape:
        raise ShapeError("group means differ in length")
    d = mean1 - mean2
    G = np.outer(d, d) + eps * np.eye(d.size)
    S = cholesky(G)
    S_inv = solve_triangular(S, np.eye(d.size), lower=True)
    return FirstMomentTransform(S=S, S_inv=S_inv, eps=float(eps), mean1=mean1, mean2=mean2)


def build_M(X1, X2) -> np.ndarray:
    """Difference of unbiased covariance estimates, ``cov(X1) - cov(X2)``."""
    X1 = _check_group(X1, "X1", 2)
    X2 = _check_group(X2, "X2", 2)
    if X1.shape[1] != X2.shape[1]:
        raise ShapeError("groups have different feature counts")
    C1 = X1 - X1.mean(axis=0)
    C2 = X2 - X2.mean(axis=0)
    M = C1.T @ C1 / (X1.shape[0] - 1) - C2.T @ C2 / (X2.shape[0] - 1)
    return 0.5 * (M + M.T)


def build_second_moment_transform(M, rank_tol: float = RANK_TOL) -> SecondMomentTransform:
    M = as_matrix(M, "M")
    eig = sym_eig(M)
    lam = eig.eigenvalues
    top = np.abs(lam).max() if lam.size else 0.0
    keep = np.abs(lam) > rank_tol * top if top > 0 else np.zeros(lam.shape, dtype=bool)
    root = np.where(keep, np.sqrt(np.abs(lam)), 0.0)
    S = eig.Q * root
    inv_root = np.zeros_like(root)
    inv_root[keep] = 1.0 / root[keep]
    # pseudo-inverse of Q diag(root) is diag(1/root) Q^T on the kept columns
    S_inv = inv_root[:, None] * eig.Q.T
    return SecondMomentTransform(
        M=0.5 * (M + M.T), Q=eig.Q, eigenvalues=lam, S=S, S_inv=S_inv, rank=int(keep.sum())
    )


def _check_w(W, n):
    W = as_matrix(W, "W")
    if W.shape[1] != n:
        raise ShapeError(f"W has {W.shape[1]} columns, inputs have {n}")
    return W


def d_e_squared(mean1, mean2, W) -> float:
    """Squared distance between the group output means ``mean_a @ W.T``."""
    d = np.asarray(mean1, dtype=float).ravel() - np.asarray(mean2, dtype=float).ravel()
    W = _check_w(W, d.size)
    gap = W @ d
    return float(gap @ gap)


def d_v_squared(X1, X2, W) -> float:
    """Squared Frobenius distance between the group output covariances."""
    M = build_M(X1, X2)
    W = _check_w(W, M.shape[0])
    G = W @ M @ W.T
    return float(np.sum(G * G))


def moment_diagnostics(X1, X2, W, eps: float = DEFAULT_EPS_E) -> dict:
    """Spectra and bound values for the JSON diagnostic dump."""
    m1, m2 = group_means(X1, X2)
    fm = build_first_moment_transform(m1, m2, eps)
    sm = build_second_moment_transform(build_M(X1, X2))
    W = as_matrix(W, "W")
    s_e = np.linalg.svd(W @ fm.S, compute_uv=False)
    s_v = np.linalg.svd(W @ sm.S, compute_uv=False)
    return {
        "d_e_squared": d_e_squared(m1, m2, W),
        "d_v_squared": d_v_squared(X1, X2, W),
        "first_moment_bound": float(np.sum(s_e ** 2)),
        "second_moment_bound": float(np.sum(s_v ** 4)),
        "singular_values_e": s_e.tolist(),
        "singular_values_v": s_v.tolist(),
        "M_eigenvalues": sm.eigenvalues.tolist(),
    }
