"""Posterior summaries of a fitted model: relative risks, attributable fractions, exceedance probabilities, random-effect maps.

Log relative risks are linear in the latent vector, so their point
estimates and intervals are exact Gaussian functionals of the Laplace
approximation. Attributable-fraction aggregates and exceedance
probabilities are Monte-Carlo over draws from N(xi_hat, Sigma_hat).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.stats

from .crossbasis import overall_basis_row, predict_basis_row
from .fitengine import LatentFit
from .panel import PanelData

__all__ = [
    "RiskGrid",
    "PosteriorDraws",
    "draw_latent",
    "rr_lag",
    "rr_overall",
    "af_forward",
    "af_backward",
    "exceedance_rr",
    "exceedance_af",
    "random_effect_summary",
]


@dataclass(frozen=True)
class RiskGrid:
    """Exposure evaluation grid with its reference level."""

    values: np.ndarray
    x0: float

    def __post_init__(self):
        object.__setattr__(self, "values", np.atleast_1d(np.asarray(self.values, dtype=float)))


@dataclass(frozen=True)
class PosteriorDraws:
    """Samples from the Gaussian posterior approximation (n_draws x dim)."""

    values: np.ndarray
    seed: object = None

    @property
    def n(self) -> int:
        return self.values.shape[0]


def draw_latent(fit: LatentFit, n: int, seed=None) -> PosteriorDraws:
    """n draws xi_hat + chol_Sigma z with z standard normal; deterministic per seed."""
    if n < 1:
        raise ValueError(f"need n >= 1 draws, got {n}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((fit.xi_hat.size, n))
    values = (fit.xi_hat[:, None] + fit.chol_sigma @ z).T
    return PosteriorDraws(values=np.ascontiguousarray(values), seed=seed)


def _theta_contrast(fit: LatentFit, x: float, x0: float, l: int | None) -> np.ndarray:
    """Full-dimension contrast vector for log RR at one grid point.

    ``l`` None means the lag-cumulated (overall) contrast.
    """
    model = fit.model
    cb = model.crossbasis
    c = np.zeros(model.dim)
    if l is None:
        row_x = overall_basis_row(x, cb.lag_knots, cb.exposure_knots, cb.window.L)
        row_0 = overall_basis_row(x0, cb.lag_knots, cb.exposure_knots, cb.window.L)
    else:
        row_x = predict_basis_row(x, cb.lag_knots, cb.exposure_knots, l)
        row_0 = predict_basis_row(x0, cb.lag_knots, cb.exposure_knots, l)
    c[model.sl_theta] = row_x - row_0
    return c


def _gaussian_interval(fit: LatentFit, contrasts: np.ndarray, level: float):
    """Point estimate and Gaussian interval of exp(c' xi) per contrast row."""
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    z = scipy.stats.norm.ppf(0.5 + level / 2.0)
    mean = contrasts @ fit.xi_hat
    half = fit.chol_sigma.T @ contrasts.T  # dim x n_contrasts
    sd = np.sqrt(np.sum(half**2, axis=0))
    return np.exp(mean), np.exp(mean - z * sd), np.exp(mean + z * sd)


def rr_lag(fit: LatentFit, grid: RiskGrid, l: int, level: float = 0.95):
    """Lag-specific relative risk (point, lo, hi) against the grid's reference."""
    contrasts = np.vstack([_theta_contrast(fit, x, grid.x0, l) for x in grid.values])
    return _gaussian_interval(fit, contrasts, level)


def rr_overall(fit: LatentFit, grid: RiskGrid, level: float = 0.95):
    """Relative risk cumulated over lags 0..L (point, lo, hi) per grid value."""
    contrasts = np.vstack([_theta_contrast(fit, x, grid.x0, None) for x in grid.values])
    return _gaussian_interval(fit, contrasts, level)


def _af_from_contrast(fit: LatentFit, contrast: np.ndarray) -> float:
    return float(1.0 - np.exp(-contrast @ fit.xi_hat))


def af_forward(fit: LatentFit, x_series, t: int, x0: float) -> float:
    """Attributable fraction looking forward: current exposure, cumulated future risk."""
    x_series = np.asarray(x_series, dtype=float)
    if not 0 <= t < x_series.size:
        raise ValueError(f"time index {t} outside the series")
    return _af_from_contrast(fit, _theta_contrast(fit, float(x_series[t]), x0, None))


def backward_af_contrast(fit: LatentFit, x_series, t: int, x0: float) -> np.ndarray:
    """Full-dimension contrast for the backward attributable fraction at time t."""
    model = fit.model
    cb = model.crossbasis
    L = cb.window.L
    x_series = np.asarray(x_series, dtype=float)
    if t - L < 0 or t >= x_series.size:
        raise ValueError(f"insufficient history for backward AF at index {t} with max lag {L}")
    c = np.zeros(model.dim)
    for l in range(L + 1):
        row_x = predict_basis_row(float(x_series[t - l]), cb.lag_knots, cb.exposure_knots, l)
        row_0 = predict_basis_row(x0, cb.lag_knots, cb.exposure_knots, l)
        c[model.sl_theta] += row_x - row_0
    return c


def af_backward(fit: LatentFit, x_series, t: int, x0: float) -> float:
    """Attributable fraction looking backward: past exposures, current risk."""
    return _af_from_contrast(fit, backward_af_contrast(fit, x_series, t, x0))


def exceedance_rr(
    fit: LatentFit,
    grid: RiskGrid,
    draws: PosteriorDraws,
    threshold: float = 1.0,
) -> np.ndarray:
    """Monte-Carlo probability that the overall RR strictly exceeds ``threshold`` per grid value."""
    contrasts = np.vstack([_theta_contrast(fit, x, grid.x0, None) for x in grid.values])
    samples = contrasts @ draws.values.T  # n_grid x n_draws
    return np.mean(samples > np.log(threshold), axis=1)


def exceedance_af(
    fit: LatentFit,
    panel: PanelData,
    window: tuple[int, int],
    x0: float,
    draws: PosteriorDraws,
    threshold: float = 0.0,
) -> np.ndarray:
    """Per-unit probability that the window-aggregated attributable number exceeds ``threshold``.

    The aggregate per unit is sum_t y_t * AF_b(x_t, t) over window times
    with a complete lag history, i.e. the attributable count.
    """
    model = fit.model
    L = model.crossbasis.window.L
    t_lo, t_hi = window
    probs = np.empty(panel.J)
    for code in range(panel.J):
        rows = panel.unit_rows(code)
        t = panel.t_index[rows]
        eligible = np.flatnonzero((t >= t_lo) & (t <= t_hi) & (t - t[0] >= L))
        if eligible.size == 0:
            raise ValueError(
                f"empty window for unit {panel.units[code]!r}: no time points in "
                f"[{t_lo}, {t_hi}] with a complete lag history"
            )
        x = panel.exposure[rows]
        y = panel.y[rows][eligible]
        contrasts = np.vstack(
            [backward_af_contrast(fit, x, int(i), x0) for i in eligible]
        )
        vals = contrasts @ draws.values.T  # n_t x n_draws
        attributable = y @ (1.0 - np.exp(-vals))
        probs[code] = np.mean(attributable > threshold)
    return probs


def random_effect_summary(fit: LatentFit, level: float = 0.95):
    """Per-unit random-effect (mean, lo, hi); convolution components are combined."""
    model = fit.model
    if model.spatial is None:
        raise ValueError("the fitted model has no random effects")
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    z = scipy.stats.norm.ppf(0.5 + level / 2.0)
    xu = fit.xi_hat[model.sl_u]
    C = model.u_basis
    mean = xu if C is None else C @ xu
    S_u = fit.chol_sigma[model.sl_u, :]  # d_u x dim
    rows = S_u if C is None else C @ S_u
    sd = np.sqrt(np.sum(rows**2, axis=1))
    return mean, mean - z * sd, mean + z * sd
