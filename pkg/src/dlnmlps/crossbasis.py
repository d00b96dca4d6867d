"""Lagged exposure matrices and the tensor-product cross-basis.

For each usable observation (a time point with a complete lag window
inside its unit's series) the cross-basis row is

    w[(i-1)*v_l + k] = sum_l btilde_i(x_{t-l}) * bcup_k(l)

i.e. the exposure basis evaluated at the lagged exposures, contracted
against the lag basis evaluated at 0..L. Coefficients are flattened with
the lag index fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import KnotSet, bspline_eval
from .panel import PanelData

__all__ = [
    "LagWindow",
    "LagMatrix",
    "CrossBasis",
    "build_lag_matrix",
    "build_crossbasis",
    "predict_basis_row",
    "overall_basis_row",
]


@dataclass(frozen=True)
class LagWindow:
    """Maximum lag and the integer lag grid 0..L."""

    L: int

    def __post_init__(self):
        if self.L < 0:
            raise ValueError(f"max lag must be >= 0, got {self.L}")

    @property
    def lag_values(self) -> np.ndarray:
        return np.arange(self.L + 1, dtype=float)


@dataclass(frozen=True)
class LagMatrix:
    """One row of L+1 lagged exposures (current value first) per usable observation."""

    values: np.ndarray
    unit_index: np.ndarray
    t_index: np.ndarray
    panel_rows: np.ndarray
    window: LagWindow

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CrossBasis:
    """Dense cross-basis W plus the marginal knot sets needed for prediction rows."""

    W: np.ndarray
    exposure_knots: KnotSet
    lag_knots: KnotSet
    window: LagWindow
    lag_basis: np.ndarray = field(repr=False, default=None)

    @property
    def v_x(self) -> int:
        return self.exposure_knots.n_basis

    @property
    def v_l(self) -> int:
        return self.lag_knots.n_basis

    @property
    def n_columns(self) -> int:
        return self.v_x * self.v_l


def build_lag_matrix(panel: PanelData, L: int) -> LagMatrix:
    """Complete-case lag windows: the first L observations of each unit are dropped."""
    window = LagWindow(L)
    panel.validate_contiguous()
    short = [panel.units[c] for c in range(panel.J) if np.count_nonzero(panel.unit_index == c) <= L]
    if short:
        raise ValueError(
            f"series too short for max lag {L}: unit(s) {short[:5]!r} have <= {L} observations"
        )
    blocks, units, ts, rows = [], [], [], []
    for code in range(panel.J):
        idx = panel.unit_rows(code)
        x = panel.exposure[idx]
        # Row for position p holds (x_p, x_{p-1}, ..., x_{p-L}).
        win = np.lib.stride_tricks.sliding_window_view(x, L + 1)[:, ::-1]
        blocks.append(win)
        units.append(panel.unit_index[idx[L:]])
        ts.append(panel.t_index[idx[L:]])
        rows.append(idx[L:])
    return LagMatrix(
        values=np.ascontiguousarray(np.vstack(blocks)),
        unit_index=np.concatenate(units),
        t_index=np.concatenate(ts),
        panel_rows=np.concatenate(rows),
        window=window,
    )


def build_crossbasis(lagmat: LagMatrix, exposure_knots: KnotSet, lag_knots: KnotSet) -> CrossBasis:
    """Contract the exposure basis at lagged exposures against the lag basis."""
    L = lagmat.window.L
    lag_basis = bspline_eval(lagmat.window.lag_values, lag_knots).values  # (L+1) x v_l
    n = lagmat.n_rows
    flat = bspline_eval(lagmat.values.ravel(), exposure_knots).values
    exp_basis = flat.reshape(n, L + 1, exposure_knots.n_basis)
    W = np.einsum("nli,lk->nik", exp_basis, lag_basis).reshape(n, -1)
    return CrossBasis(
        W=np.ascontiguousarray(W),
        exposure_knots=exposure_knots,
        lag_knots=lag_knots,
        window=lagmat.window,
        lag_basis=lag_basis,
    )


def predict_basis_row(x: float, lag_knots: KnotSet, exposure_knots: KnotSet, l: int) -> np.ndarray:
    """Single tensor row btilde_i(x) * bcup_k(l), flattened with k fastest."""
    if not 0 <= l <= lag_knots.hi:
        raise ValueError(f"lag {l} outside [0, {lag_knots.hi}]")
    bx = bspline_eval(np.array([float(x)]), exposure_knots).values[0]
    bl = bspline_eval(np.array([float(l)]), lag_knots).values[0]
    return np.outer(bx, bl).ravel()


def overall_basis_row(x: float, lag_knots: KnotSet, exposure_knots: KnotSet, L: int) -> np.ndarray:
    """Tensor row cumulated over lags 0..L."""
    bx = bspline_eval(np.array([float(x)]), exposure_knots).values[0]
    lag_sum = bspline_eval(np.arange(L + 1, dtype=float), lag_knots).values.sum(axis=0)
    return np.outer(bx, lag_sum).ravel()
