"""Dense factorizations and a safeguarded scalar root finder.

Thin wrappers over LAPACK (through numpy) that enforce the conventions the
rest of the package relies on: a single relative rank tolerance, eigenvalues
ordered by magnitude, and explicit errors instead of silent NaNs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import BracketError, InputError, PositiveDefinitenessError, ShapeError

RANK_TOL = 1e-10


def as_matrix(A, name: str = "matrix") -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InputError(f"{name} contains non-finite entries")
    return A


@dataclass(frozen=True)
class SymEig:
    Q: np.ndarray
    eigenvalues: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.Q * self.eigenvalues) @ self.Q.T


@dataclass(frozen=True)
class ThinSVD:
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray  # columns are right singular vectors

    @property
    def rank(self) -> int:
        return int(self.s.size)

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.s) @ self.V.T


def cholesky(A) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == A``.

    Raises PositiveDefinitenessError when a pivot is not positive, which in
    practice means the regularizer added to a rank-one Gram matrix was too
    small to survive rounding.
    """
    A = as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ShapeError("cholesky needs a square matrix")
    scale = max(np.abs(A).max(), 1.0)
    if np.abs(A - A.T).max() > 1e-10 * scale:
        raise InputError("cholesky input is not symmetric")
    try:
        L = np.linalg.cholesky(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise PositiveDefinitenessError(str(exc)) from exc
    if np.any(np.diag(L) <= 0):
        raise PositiveDefinitenessError("non-positive pivot")
    return L


def sym_eig(M) -> SymEig:
    """Eigendecomposition of a symmetric matrix, sorted by descending |lambda|."""
    M = as_matrix(M, "M")
    if M.shape[0] != M.shape[1]:
        raise ShapeError("sym_eig needs a square matrix")
    lam, Q = np.linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(-np.abs(lam), kind="stable")
    return SymEig(Q=Q[:, order], eigenvalues=lam[order])


def thin_svd(A, rank_tol: float = RANK_TOL) -> ThinSVD:
    """SVD keeping only singular values above ``rank_tol * s_max``."""
    A = as_matrix(A, "A")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        r = 0
    else:
        r = int(np.count_nonzero(s > rank_tol * s[0]))
    return ThinSVD(U=U[:, :r], s=s[:r], V=Vt[:r].T)


def pinv(S, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with the package-wide rank cutoff."""
    S = as_matrix(S, "S")
    svd = thin_svd(S, rank_tol)
    if svd.rank == 0:
        return np.zeros(S.T.shape)
    return (svd.V / svd.s) @ svd.U.T


def _split(lo: float, hi: float) -> float:
    if lo > 0.0 and hi / lo > 16.0:
        return math.sqrt(lo * hi)
    if lo == 0.0 and hi > 1e-300:
        return hi / 1024.0
    return 0.5 * (lo + hi)


def solve_monotone_scalar(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-12,
    fprime: Optional[Callable[[float], float]] = None,
    xtol: Optional[float] = None,
    maxiter: int = 200,
) -> float:
    """Root of a strictly monotone ``f`` bracketed by ``[lo, hi]``.

    Newton steps are taken when ``fprime`` is given and the step lands inside
    the current bracket; otherwise the bracket is bisected. Bisection switches
    to the geometric midpoint when the bracket spans several decades, so roots
    near zero are resolved to relative precision.

    Stops when ``|f(x)| <= tol`` or the bracket is narrower than
    ``xtol * max(1, |x|)`` (``xtol`` defaults to ``tol``).
    """
    xtol = tol if xtol is None else xtol
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi) or not (math.isfinite(f_lo) and math.isfinite(f_hi)):
        raise BracketError(f"no sign change on [{lo}, {hi}]: f={f_lo}, {f_hi}")
    increasing = f_hi > f_lo

    x = lo if abs(f_lo) < abs(f_hi) else hi
    fx = f_lo if x == lo else f_hi
    for _ in range(maxiter):
        if abs(fx) <= tol:
            return x
        if hi - lo <= max(xtol * max(1.0, abs(x)), 4.0 * np.finfo(float).eps * abs(x)):
            return x
        width = hi - lo
        cand = None
        if fprime is not None:
            d = fprime(x)
            if d != 0.0 and math.isfinite(d):
                step = x - fx / d
                if lo < step < hi:
                    cand = step
        if cand is None:
            cand = _split(lo, hi)
        fc = f(cand)
        if not math.isfinite(fc):
            raise BracketError(f"f({cand}) is not finite")
        if (fc > 0) == increasing:
            hi = cand
        else:
            lo = cand
        x, fx = cand, fc
        # Newton that fails to halve the bracket gets a forced bisection next.
        if fprime is not None and hi - lo > 0.5 * width and fc != 0.0:
            mid = _split(lo, hi)
            fm = f(mid)
            if (fm > 0) == increasing:
                hi = mid
            else:
                lo = mid
            if abs(fm) < abs(fx):
                x, fx = mid, fm
        if fx == 0.0:
            return x
    return x
