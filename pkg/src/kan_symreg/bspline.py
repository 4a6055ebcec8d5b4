"""B-spline bases on clamped uniform knots.

Basis values are computed with the triangular (de Boor) scheme for the knot
span containing ``x``. Points outside ``[lo, hi]`` reuse the first or last
span, so the end polynomial pieces are extrapolated instead of dropping to
zero. All functions accept scalars or 1-D arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RIDGE = 1e-8


class DomainError(ValueError):
    """Raised for non-finite evaluation points."""


@dataclass(frozen=True)
class SplineBasis:
    order: int
    grid_count: int
    lo: float = 0.0
    hi: float = 1.0
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.order) < 1:
            raise ValueError(f"spline order must be >= 1, got {self.order}")
        if int(self.grid_count) < 1:
            raise ValueError(f"grid count must be >= 1, got {self.grid_count}")
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.hi > self.lo):
            raise ValueError(f"invalid spline domain [{self.lo}, {self.hi}]")
        k = int(self.order)
        interior = np.linspace(self.lo, self.hi, int(self.grid_count) + 1)
        knots = np.concatenate([np.full(k, float(self.lo)), interior, np.full(k, float(self.hi))])
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def n_basis(self) -> int:
        return self.grid_count + self.order

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / self.grid_count


@dataclass
class SplineCurve:
    basis: SplineBasis
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.basis.n_basis,):
            raise ValueError(
                f"expected {self.basis.n_basis} coefficients, got shape {self.coefficients.shape}"
            )


def _as_points(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("B-spline evaluation point is not finite")
    return arr


def _local_values(knots: np.ndarray, degree: int, span: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Nonzero basis values of the given degree on ``span``, shape (n, degree + 1).

    Column ``r`` holds basis function ``span - degree + r``.
    """
    n = x.shape[0]
    vals = np.zeros((n, degree + 1))
    vals[:, 0] = 1.0
    left = np.empty((n, degree + 1))
    right = np.empty((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = x - knots[span + 1 - j]
        right[:, j] = knots[span + j] - x
        saved = np.zeros(n)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = vals[:, r] / denom
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved
    return vals


def _spans(basis: SplineBasis, x: np.ndarray) -> np.ndarray:
    k = basis.order
    span = np.searchsorted(basis.knots, x, side="right") - 1
    return np.clip(span, k, basis.n_basis - 1)


def basis_matrix(basis: SplineBasis, x) -> np.ndarray:
    """Dense basis matrix of shape (len(x), n_basis)."""
    x = np.atleast_1d(_as_points(x)).ravel()
    k = basis.order
    span = _spans(basis, x)
    local = _local_values(basis.knots, k, span, x)
    out = np.zeros((x.shape[0], basis.n_basis))
    rows = np.arange(x.shape[0])[:, None]
    cols = span[:, None] - k + np.arange(k + 1)[None, :]
    out[rows, cols] = local
    return out


def basis_deriv_matrix(basis: SplineBasis, x) -> np.ndarray:
    """Dense matrix of basis first derivatives, shape (len(x), n_basis)."""
    x = np.atleast_1d(_as_points(x)).ravel()
    k = basis.order
    t = basis.knots
    span = _spans(basis, x)
    # degree k-1 functions live on the same knot vector; there are n_basis + 1 of them
    low = np.zeros((x.shape[0], basis.n_basis + 1))
    rows = np.arange(x.shape[0])[:, None]
    cols = span[:, None] - (k - 1) + np.arange(k)[None, :]
    low[rows, cols] = _local_values(t, k - 1, span, x)
    i = np.arange(basis.n_basis)
    d_left = t[i + k] - t[i]
    d_right = t[i + k + 1] - t[i + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(d_left > 0, k / d_left, 0.0)
        b = np.where(d_right > 0, k / d_right, 0.0)
    return low[:, :-1] * a - low[:, 1:] * b


def eval_basis(basis: SplineBasis, x):
    """All basis values at ``x``; a vector for scalar input, else a matrix."""
    mat = basis_matrix(basis, x)
    return mat[0] if np.ndim(x) == 0 else mat


def eval_curve(curve: SplineCurve, x):
    vals = basis_matrix(curve.basis, x) @ curve.coefficients
    return float(vals[0]) if np.ndim(x) == 0 else vals


def eval_curve_deriv(curve: SplineCurve, x):
    vals = basis_deriv_matrix(curve.basis, x) @ curve.coefficients
    return float(vals[0]) if np.ndim(x) == 0 else vals


def fit_curve(basis: SplineBasis, xs, ys, ridge: float = RIDGE) -> SplineCurve:
    """Ridge-regularised least-squares spline fit."""
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if xs.shape != ys.shape:
        raise ValueError(f"xs and ys differ in length ({xs.size} vs {ys.size})")
    if xs.size < basis.n_basis:
        raise ValueError(f"need at least {basis.n_basis} points, got {xs.size}")
    B = basis_matrix(basis, xs)
    lhs = B.T @ B + ridge * np.eye(basis.n_basis)
    coef = np.linalg.solve(lhs, B.T @ ys)
    return SplineCurve(basis, coef)
