"""Synthetic panels with known dose-lag surfaces and spatial effects, plus replicate scoring.

Exposures are standardized to [0, 10] by the pooled min-max map, counts
are Poisson around exp(log population + baseline + cumulated surface +
unit effect), and fits are scored by RMSE / closed-interval coverage of
the lag-specific and cumulated log relative risks, the random effects
and the incidence, mirroring the evaluation layout of the reference
protocol at desk scale.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .fitengine import LatentFit, ModelSettings, build_model_spec, fit as run_fit_engine
from .panel import PanelData
from .posterior import RiskGrid, random_effect_summary, rr_lag, rr_overall
from .spatial import AdjacencyGraph, SpatialPrior, grid_graph, sample_spatial_effect, structure_matrix

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

__all__ = [
    "Scenario",
    "TruthRecord",
    "ReplicateResult",
    "SimConfig",
    "make_scenario",
    "simulate_panel",
    "score_replicate",
    "run_replicate",
    "run_simulation",
    "aggregate_results",
    "toy_london_panel",
]

SCENARIO_NAMES = ("plane", "temp-like", "complex-like", "custom")


@dataclass(frozen=True)
class Scenario:
    """True dose-lag log-RR surface plus the generating knobs around it."""

    name: str
    L: int
    x0: float
    surface: Callable
    baseline_log_rate: float = -8.5
    pop_log_mean: float = np.log(10_000.0)
    pop_log_sd: float = 0.3
    seasonal_amp: float = 3.0
    ar_coef: float = 0.8
    noise_sd: float = 1.5
    period: float = 365.0

    def overall(self, x) -> np.ndarray:
        """Log RR cumulated over lags 0..L at exposure x."""
        lags = np.arange(self.L + 1, dtype=float)
        return np.sum(self.surface(np.atleast_1d(np.asarray(x, dtype=float))[:, None], lags[None, :]), axis=1)


def make_scenario(name: str, params: dict | None = None) -> Scenario:
    """Named true surfaces: a plane, a J-shaped heat/cold surface, a bimodal surface, or a user grid."""
    p = dict(params or {})
    L = int(p.pop("L", 40))
    if name == "plane":
        alpha = float(p.pop("alpha", 0.004))
        x0 = float(p.pop("x0", 0.0))

        def surface(x, l):
            w = np.maximum(0.0, 1.0 - l / (L + 1.0))
            return alpha * (np.asarray(x) - x0) * w

    elif name == "temp-like":
        x0 = float(p.pop("x0", 2.0))
        heat = float(p.pop("heat", 0.08))
        cold = float(p.pop("cold", 0.04))
        lag_scale = float(p.pop("lag_scale", 5.0))

        def surface(x, l):
            x = np.asarray(x, dtype=float)
            up = heat * np.maximum(x - x0, 0.0) ** 2 / (10.0 - x0) ** 2
            down = cold * np.maximum(x0 - x, 0.0) ** 2 / max(x0, 1e-12) ** 2
            return (up + down) * np.exp(-l / lag_scale)

    elif name == "complex-like":
        x0 = float(p.pop("x0", 5.0))
        a1 = float(p.pop("a1", 0.06))
        m1, s1 = float(p.pop("m1", 2.5)), float(p.pop("s1", 1.2))
        a2 = float(p.pop("a2", 0.08))
        m2, s2 = float(p.pop("m2", 8.0)), float(p.pop("s2", 1.0))
        lag_peak, lag_width = float(p.pop("lag_peak", 8.0)), float(p.pop("lag_width", 4.0))

        def surface(x, l):
            x = np.asarray(x, dtype=float)
            bump1 = np.exp(-0.5 * ((x - m1) / s1) ** 2) - np.exp(-0.5 * ((x0 - m1) / s1) ** 2)
            bump2 = np.exp(-0.5 * ((x - m2) / s2) ** 2) - np.exp(-0.5 * ((x0 - m2) / s2) ** 2)
            w1 = np.exp(-l / 3.0)
            w2 = np.exp(-0.5 * ((l - lag_peak) / lag_width) ** 2)
            return a1 * bump1 * w1 + a2 * bump2 * w2

    elif name == "custom":
        x_grid = np.asarray(p.pop("x_grid"), dtype=float)
        lag_grid = np.asarray(p.pop("lag_grid"), dtype=float)
        values = np.asarray(p.pop("values"), dtype=float)
        x0 = float(p.pop("x0", 0.0))
        from scipy.interpolate import RegularGridInterpolator

        interp = RegularGridInterpolator(
            (x_grid, lag_grid), values, method="linear", bounds_error=False, fill_value=None
        )

        def surface(x, l):
            x = np.asarray(x, dtype=float)
            l = np.asarray(l, dtype=float)
            xb, lb = np.broadcast_arrays(x, l)
            pts = np.column_stack([xb.ravel(), lb.ravel()])
            ref = np.column_stack([np.full(lb.size, x0), lb.ravel()])
            return (interp(pts) - interp(ref)).reshape(xb.shape)

        L = int(p.pop("L", int(lag_grid.max())))
    else:
        raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}")

    scenario_fields = {k: p.pop(k) for k in list(p) if k in (
        "baseline_log_rate", "pop_log_mean", "pop_log_sd", "seasonal_amp", "ar_coef", "noise_sd", "period"
    )}
    if p:
        raise ValueError(f"unknown scenario parameter(s): {sorted(p)}")
    return Scenario(name=name, L=L, x0=x0, surface=surface, **scenario_fields)


@dataclass
class TruthRecord:
    """Generating quantities kept for scoring a single replicate."""

    scenario: Scenario
    u: np.ndarray | None
    beta0: float
    mu_usable: np.ndarray
    population_usable: np.ndarray
    usable_rows: np.ndarray
    hypers: dict
    seed_key: str


def _synthetic_exposure(rng, J: int, T: int, scenario: Scenario) -> np.ndarray:
    """Shared seasonal cycle plus unit-level AR(1) noise, pooled-standardized to [0, 10]."""
    t = np.arange(T)
    seasonal = scenario.seasonal_amp * np.sin(2.0 * np.pi * t / scenario.period + 0.3)
    raw = np.empty((J, T))
    for j in range(J):
        z = np.empty(T)
        z[0] = rng.normal(0.0, scenario.noise_sd)
        eps = rng.normal(0.0, scenario.noise_sd, size=T)
        for i in range(1, T):
            z[i] = scenario.ar_coef * z[i - 1] + eps[i]
        raw[j] = 15.0 + seasonal + z
    lo, hi = raw.min(), raw.max()
    return 10.0 * (raw - lo) / (hi - lo)


def simulate_panel(
    scenario: Scenario,
    J: int,
    T: int,
    prior: SpatialPrior | None,
    graph: AdjacencyGraph | None,
    hypers: dict | None,
    seed,
    exposure: np.ndarray | None = None,
) -> tuple[PanelData, TruthRecord]:
    """Poisson panel around the scenario surface with optional sampled spatial effects.

    ``exposure`` may supply a (J, T) or (T,) series already on the
    standardized scale; otherwise a synthetic series is generated. Rows
    with an incomplete lag history get baseline-only counts (the fit
    drops them).
    """
    rng = np.random.default_rng(seed)
    L = scenario.L
    if T <= L:
        raise ValueError(f"need T > L, got T={T}, L={L}")

    if exposure is None:
        x = _synthetic_exposure(rng, J, T, scenario)
    else:
        exposure = np.asarray(exposure, dtype=float)
        x = np.broadcast_to(exposure, (J, T)).copy() if exposure.ndim == 1 else exposure.copy()
        if x.shape != (J, T):
            raise ValueError(f"exposure has shape {exposure.shape}, expected ({J}, {T}) or ({T},)")

    u = None
    hypers = dict(hypers or {})
    if prior is not None:
        if prior.kind not in ("independent", "leroux"):
            raise ValueError(f"sampling spatial effects is not supported for the {prior.kind!r} prior")
        struct = structure_matrix(graph)
        u = sample_spatial_effect(prior, struct, seed=rng, **hypers)

    pop = np.exp(rng.normal(scenario.pop_log_mean, scenario.pop_log_sd, size=J))
    lags = np.arange(L + 1, dtype=float)

    units = [f"area{j + 1:04d}" for j in range(J)]
    unit_index = np.repeat(np.arange(J), T)
    t_index = np.tile(np.arange(1, T + 1), J)
    y = np.empty(J * T)
    mu_usable_parts = []
    usable_parts = []
    pop_usable_parts = []
    for j in range(J):
        eta_base = np.log(pop[j]) + scenario.baseline_log_rate + (u[j] if u is not None else 0.0)
        windows = np.lib.stride_tricks.sliding_window_view(x[j], L + 1)[:, ::-1]
        cumulated = scenario.surface(windows, lags[None, :]).sum(axis=1)
        eta = np.full(T, eta_base)
        eta[L:] += cumulated
        mu = np.exp(eta)
        y[j * T : (j + 1) * T] = rng.poisson(mu)
        rows = np.arange(j * T + L, (j + 1) * T)
        usable_parts.append(rows)
        mu_usable_parts.append(mu[L:])
        pop_usable_parts.append(np.full(T - L, pop[j]))

    panel = PanelData(
        units=units,
        unit_index=unit_index,
        t_index=t_index,
        y=y,
        exposure=x.ravel(),
        population=np.repeat(pop, T),
        graph=graph,
    )
    truth = TruthRecord(
        scenario=scenario,
        u=u,
        beta0=scenario.baseline_log_rate,
        mu_usable=np.concatenate(mu_usable_parts),
        population_usable=np.concatenate(pop_usable_parts),
        usable_rows=np.concatenate(usable_parts),
        hypers=hypers,
        seed_key=str(seed),
    )
    return panel, truth


@dataclass
class ReplicateResult:
    """Per-replicate metrics in the layout of the evaluation tables."""

    replicate: int
    seed_key: str
    converged: bool
    runtime_s: float
    rmse_rr_lag: float
    cov_rr_lag: float
    rmse_rr_overall: float
    cov_rr_overall: float
    rmse_re: float | None
    cov_re: float | None
    rmse_incidence: float
    cov_incidence: float
    beta0_hat: float
    beta0_sd: float
    beta0_true: float
    rho_hat: float | None
    spatial_variance_hat: float | None
    n_hyper_evals: int = 0

    def as_row(self) -> dict:
        return asdict(self)

    FIELDS = (
        "replicate", "seed_key", "converged", "runtime_s",
        "rmse_rr_lag", "cov_rr_lag", "rmse_rr_overall", "cov_rr_overall",
        "rmse_re", "cov_re", "rmse_incidence", "cov_incidence",
        "beta0_hat", "beta0_sd", "beta0_true", "rho_hat",
        "spatial_variance_hat", "n_hyper_evals",
    )


def score_replicate(
    fit: LatentFit,
    truth: TruthRecord,
    grid: RiskGrid,
    level: float = 0.95,
) -> ReplicateResult:
    """RMSE and closed-interval coverage of log RRs, random effects and incidence."""
    import scipy.stats

    model = fit.model
    L = model.crossbasis.window.L
    scenario = truth.scenario
    x0 = grid.x0

    # lag-specific log RR over the full (x, lag) grid
    errs, hits, total = [], 0, 0
    for l in range(L + 1):
        point, lo, hi = rr_lag(fit, grid, l=l, level=level)
        true_log = scenario.surface(grid.values, float(l)) - scenario.surface(np.array([x0]), float(l))
        log_p = np.log(point)
        errs.append(log_p - true_log)
        true_rr = np.exp(true_log)
        hits += int(np.sum((lo <= true_rr) & (true_rr <= hi)))
        total += grid.values.size
    errs = np.concatenate(errs)
    rmse_lag = float(np.sqrt(np.mean(errs**2)))
    cov_lag = hits / total

    point, lo, hi = rr_overall(fit, grid, level=level)
    true_overall = scenario.overall(grid.values) - scenario.overall(np.array([x0]))
    rmse_overall = float(np.sqrt(np.mean((np.log(point) - true_overall) ** 2)))
    true_rr = np.exp(true_overall)
    cov_overall = float(np.mean((lo <= true_rr) & (true_rr <= hi)))

    rmse_re = cov_re = None
    if model.spatial is not None and truth.u is not None:
        mean, lo_u, hi_u = random_effect_summary(fit, level=level)
        rmse_re = float(np.sqrt(np.mean((mean - truth.u) ** 2)))
        cov_re = float(np.mean((lo_u <= truth.u) & (truth.u <= hi_u)))

    # incidence (rate per person) over the usable rows
    eta_hat = model.eta(fit.xi_hat)
    z = scipy.stats.norm.ppf(0.5 + level / 2.0)
    half = model.H @ fit.chol_sigma  # n x dim
    sd = np.sqrt(np.sum(half**2, axis=1))
    rate_hat = np.exp(eta_hat) / truth.population_usable
    rate_true = truth.mu_usable / truth.population_usable
    rmse_inc = float(np.sqrt(np.mean((rate_hat - rate_true) ** 2)))
    lo_r = np.exp(eta_hat - z * sd) / truth.population_usable
    hi_r = np.exp(eta_hat + z * sd) / truth.population_usable
    cov_inc = float(np.mean((lo_r <= rate_true) & (rate_true <= hi_r)))

    beta0_hat = float(fit.xi_hat[0])
    beta0_sd = float(np.linalg.norm(fit.chol_sigma[0, :]))
    rho_hat = variance_hat = None
    if model.spatial is not None and "v_rho" in fit.hypers.names:
        rho_hat = fit.hypers["rho"]
    if model.spatial is not None and "v_tau" in fit.hypers.names:
        variance_hat = 1.0 / fit.hypers["tau"]

    return ReplicateResult(
        replicate=-1,
        seed_key=truth.seed_key,
        converged=fit.converged,
        runtime_s=float("nan"),
        rmse_rr_lag=rmse_lag,
        cov_rr_lag=cov_lag,
        rmse_rr_overall=rmse_overall,
        cov_rr_overall=cov_overall,
        rmse_re=rmse_re,
        cov_re=cov_re,
        rmse_incidence=rmse_inc,
        cov_incidence=cov_inc,
        beta0_hat=beta0_hat,
        beta0_sd=beta0_sd,
        beta0_true=truth.beta0,
        rho_hat=rho_hat,
        spatial_variance_hat=variance_hat,
        n_hyper_evals=fit.n_hyper_evals,
    )


@dataclass(frozen=True)
class SimConfig:
    """Everything one replicate needs; picklable for the worker pool."""

    scenario: str = "plane"
    scenario_params: dict = field(default_factory=dict)
    J: int = 25
    T: int = 200
    effect: str | None = "leroux"
    effect_hypers: dict = field(default_factory=lambda: {"tau": 2.0, "rho": 0.95})
    model: ModelSettings = ModelSettings(v_x=10, v_l=10, L=40, spatial="leroux")
    graph: AdjacencyGraph | None = None
    grid_step: float = 0.25
    level: float = 0.95
    replicates: int = 20
    workers: int = 1
    master_seed: int = 0
    maxfev: int = 2000
    retain_panels: bool = False

    def resolve_graph(self) -> AdjacencyGraph:
        if self.graph is not None:
            return self.graph
        side = int(round(np.sqrt(self.J)))
        if side * side != self.J:
            raise ValueError(
                f"J={self.J} is not a perfect square; supply an adjacency graph for non-lattice layouts"
            )
        return grid_graph(side)


def run_replicate(config: SimConfig, index: int, seed) -> tuple[ReplicateResult, PanelData | None]:
    """Simulate, fit and score one replicate."""
    scenario = make_scenario(config.scenario, {**config.scenario_params, "L": config.model.L})
    graph = config.resolve_graph()
    prior = SpatialPrior(config.effect) if config.effect else None
    panel, truth = simulate_panel(
        scenario, config.J, config.T, prior, graph, config.effect_hypers, seed
    )
    started = time.perf_counter()
    spec = build_model_spec(panel, config.model)
    fitted = run_fit_engine(spec, maxfev=config.maxfev)
    elapsed = time.perf_counter() - started
    grid = RiskGrid(values=np.arange(0.0, 10.0 + config.grid_step / 2, config.grid_step), x0=scenario.x0)
    result = score_replicate(fitted, truth, grid, level=config.level)
    result.replicate = index
    result.runtime_s = elapsed
    return result, (panel if config.retain_panels else None)


def _worker(args):
    config, index, seed = args
    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            return run_replicate(config, index, seed)
    return run_replicate(config, index, seed)  # pragma: no cover


def run_simulation(config: SimConfig):
    """Run all replicates in a process pool; results are keyed by replicate index.

    Replicates always execute in worker processes with BLAS pinned to a
    single thread, so aggregates are identical for any worker count.
    """
    seeds = np.random.SeedSequence(config.master_seed).spawn(config.replicates)
    jobs = [(config, i, seeds[i]) for i in range(config.replicates)]
    workers = max(1, int(config.workers))
    results: list = [None] * config.replicates
    panels: list = [None] * config.replicates
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for result, panel in pool.map(_worker, jobs):
            results[result.replicate] = result
            panels[result.replicate] = panel
    return results, panels


def aggregate_results(results) -> dict:
    """Mean over replicates of every numeric metric (ignoring missing values)."""
    out = {"replicates": len(results)}
    numeric = [f for f in ReplicateResult.FIELDS if f not in ("replicate", "seed_key", "converged")]
    for name in numeric:
        vals = [getattr(r, name) for r in results if getattr(r, name) is not None]
        vals = [v for v in vals if not (isinstance(v, float) and np.isnan(v))]
        out[name] = float(np.mean(vals)) if vals else None
    out["converged_fraction"] = float(np.mean([r.converged for r in results]))
    return out


def toy_london_panel(seed: int = 201306):
    """Bundled London-like toy data: 100 areas on a 10x10 lattice, 184 summer days, max lag 7."""
    scenario = make_scenario(
        "temp-like",
        {"L": 7, "x0": 2.0, "heat": 0.12, "cold": 0.05, "lag_scale": 2.0,
         "baseline_log_rate": -9.2, "pop_log_mean": np.log(8000.0), "pop_log_sd": 0.25},
    )
    graph = grid_graph(10)
    prior = SpatialPrior("leroux")
    panel, truth = simulate_panel(
        scenario, 100, 184, prior, graph, {"tau": 2.0, "rho": 0.95}, seed
    )
    return panel, truth
