"""B-spline and natural cubic spline basis matrices over arbitrary evaluation points.

B-splines are evaluated with the Cox-de-Boor recursion on a clamped
(open) knot vector, so the basis forms a partition of unity on the
closed domain and each function has local support over degree+1 knot
spans. Evaluation outside the domain is an error, never an
extrapolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KnotSet",
    "BasisMatrix",
    "equidistant_knots",
    "bspline_eval",
    "natural_cubic_eval",
]


@dataclass(frozen=True)
class KnotSet:
    """Interior knots plus boundary and degree of a clamped B-spline basis."""

    interior: np.ndarray
    lo: float
    hi: float
    degree: int = 3

    def __post_init__(self):
        interior = np.atleast_1d(np.asarray(self.interior, dtype=float))
        object.__setattr__(self, "interior", interior)
        if not self.lo < self.hi:
            raise ValueError(f"invalid range: lo={self.lo} must be < hi={self.hi}")
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        if interior.size:
            if np.any(np.diff(interior) < 0):
                raise ValueError("interior knots must be nondecreasing")
            if interior[0] <= self.lo or interior[-1] >= self.hi:
                raise ValueError("interior knots must lie strictly inside (lo, hi)")

    @property
    def n_basis(self) -> int:
        return self.interior.size + self.degree + 1

    @property
    def full_knots(self) -> np.ndarray:
        """Clamped knot vector with degree+1 repeats at each boundary."""
        k = self.degree
        return np.concatenate([np.full(k + 1, self.lo), self.interior, np.full(k + 1, self.hi)])


@dataclass(frozen=True)
class BasisMatrix:
    """Dense n_points x n_basis evaluation of a spline basis."""

    values: np.ndarray
    domain: KnotSet | None = field(default=None, repr=False)

    @property
    def columns(self) -> int:
        return self.values.shape[1]


def equidistant_knots(lo: float, hi: float, n_basis: int, degree: int = 3) -> KnotSet:
    """Equally spaced interior knots giving exactly ``n_basis`` basis columns.

    ``n_basis - degree - 1`` interior knots are placed uniformly in (lo, hi).
    """
    if not lo < hi:
        raise ValueError(f"invalid range: lo={lo} must be < hi={hi}")
    if n_basis <= degree:
        raise ValueError(f"too few basis functions: n_basis={n_basis} must exceed degree={degree}")
    n_interior = n_basis - degree - 1
    grid = np.linspace(lo, hi, n_interior + 2)
    return KnotSet(interior=grid[1:-1], lo=float(lo), hi=float(hi), degree=int(degree))


def _check_domain(points: np.ndarray, knots: KnotSet) -> None:
    bad = np.flatnonzero((points < knots.lo) | (points > knots.hi))
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"point at index {i} (value {points[i]!r}) is outside the basis domain "
            f"[{knots.lo}, {knots.hi}]; extrapolation is not supported"
        )


def bspline_eval(points, knots: KnotSet) -> BasisMatrix:
    """Evaluate the B-spline basis at ``points`` via the Cox-de-Boor recursion.

    Returns an n_points x n_basis matrix whose rows sum to one. Points
    outside [lo, hi] raise a ValueError naming the offending index.
    """
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if x.ndim != 1:
        raise ValueError("points must be one-dimensional")
    _check_domain(x, knots)

    t = knots.full_knots
    k = knots.degree
    n_basis = knots.n_basis

    # Knot span per point: i with t[i] <= x < t[i+1]; the right boundary
    # folds into the last non-empty span.
    span = np.searchsorted(t, x, side="right") - 1
    span = np.clip(span, k, n_basis - 1)

    # Vectorized triangular recurrence (Piegl & Tiller A2.2): N holds the
    # k+1 local nonzero basis values per point.
    npts = x.size
    N = np.zeros((npts, k + 1))
    N[:, 0] = 1.0
    left = np.empty((npts, k + 1))
    right = np.empty((npts, k + 1))
    for j in range(1, k + 1):
        left[:, j] = x - t[span + 1 - j]
        right[:, j] = t[span + j] - x
        saved = np.zeros(npts)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = N[:, r] / denom
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved

    values = np.zeros((npts, n_basis))
    cols = span[:, None] - k + np.arange(k + 1)[None, :]
    np.put_along_axis(values, cols, N, axis=1)
    return BasisMatrix(values=values, domain=knots)


def natural_cubic_eval(points, df: int, boundary: tuple[float, float]) -> BasisMatrix:
    """Natural (restricted) cubic spline basis with ``df`` columns.

    Knots are placed equidistantly over ``boundary``; the basis is linear
    beyond the boundary knots (zero second derivative there), so unlike
    ``bspline_eval`` it evaluates anywhere. df=1 reduces to a single
    scaled-linear column.
    """
    x = np.atleast_1d(np.asarray(points, dtype=float))
    lo, hi = float(boundary[0]), float(boundary[1])
    if not lo < hi:
        raise ValueError(f"invalid boundary: lo={lo} must be < hi={hi}")
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if x.size and np.ptp(x) == 0.0:
        raise ValueError("degenerate input: all evaluation points are equal")

    x_std = (x - lo) / (hi - lo)
    if df == 1:
        return BasisMatrix(values=x_std[:, None], domain=None)

    # Restricted cubic spline (Harrell) on df+1 equidistant knots: the
    # truncated cubics are combined so the tails outside [lo, hi] are linear.
    knots = np.linspace(lo, hi, df + 1)
    k_last, k_pen = knots[-1], knots[-2]
    norm = (k_last - knots[0]) ** 2

    def tc(v):
        return np.maximum(x - v, 0.0) ** 3

    cols = [x_std]
    tc_last = tc(k_last)
    tc_pen = tc(k_pen)
    for j in range(df - 1):
        kj = knots[j]
        col = tc(kj) - tc_pen * (k_last - kj) / (k_last - k_pen) + tc_last * (k_pen - kj) / (k_last - k_pen)
        cols.append(col / norm)
    return BasisMatrix(values=np.column_stack(cols), domain=None)
