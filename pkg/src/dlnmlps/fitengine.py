"""Model assembly, inner Newton-Raphson mode finding, and hyperparameter optimization.

The latent vector xi = (beta, theta, u) carries the fixed effects, the
cross-basis coefficients and the random-effect block. Fitting alternates
two levels:

* inner: given transformed hyperparameters v, maximize the conditional
  log-posterior sum(y*log mu - mu) - xi'Q xi / 2 by Newton-Raphson with
  step halving, yielding the Gaussian (Laplace) approximation
  N(xi_hat, (H'VH + Q)^{-1});
* outer: maximize the approximate marginal log-posterior of v
  (likelihood at the mode, penalty and random-effect log-determinants,
  the mode's quadratic form, the Laplace covariance log-determinant, and
  Gamma-mixture prior terms) by Nelder-Mead in the transformed space.

Intrinsic (ICAR / convolution) random-effect blocks are reparametrized
onto the per-component sum-to-zero subspace at build time, which makes
the inner problem strictly concave and the mode a true interior optimum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse
from scipy.special import expit

from .crossbasis import CrossBasis, build_crossbasis, build_lag_matrix
from .basis import equidistant_knots
from .panel import PanelData
from .penalty import PenaltyAssembly, assemble_penalty, logdet_penalty, make_penalty_assembly
from .spatial import SpatialPrior, StructureMatrix, constraint_basis, logdet_G, structure_matrix

logger = logging.getLogger(__name__)

__all__ = [
    "PriorConstants",
    "ModelSettings",
    "ModelSpec",
    "HyperVector",
    "InnerFit",
    "LatentFit",
    "NewtonError",
    "build_model_spec",
    "build_Q",
    "log_cond_posterior",
    "gradient",
    "hessian",
    "newton_mode",
    "hyper_log_posterior",
    "optimize_hypers",
    "fit",
]

ETA_OVERFLOW = 700.0

# Domain box for transformed hyperparameters. Beyond exp(18) the prior
# precisions are statistically indistinguishable from infinity while the
# gradient's floating-point floor (eps * lambda * |theta|) starts to
# breach the inner convergence tolerance, so the search treats the
# outside as impossible.
V_BOUND = 18.0


class NewtonError(RuntimeError):
    """Inner mode search failed; carries the last iterate and gradient norm."""

    def __init__(self, message, xi=None, grad_norm=None, iterations=None):
        super().__init__(message)
        self.xi = xi
        self.grad_norm = grad_norm
        self.iterations = iterations


@dataclass(frozen=True)
class PriorConstants:
    """Fixed prior constants shared by every Gamma-mixture hyperprior."""

    nu: float = 3.0
    zeta: float = 1e-5
    a: float = 1e-5
    b: float = 1e-5


@dataclass(frozen=True)
class ModelSettings:
    """Knobs for assembling a ModelSpec from panel data."""

    v_x: int = 10
    v_l: int = 10
    L: int = 7
    degree: int = 3
    diff_order: int = 2
    ridge: bool = True
    jitter: float = 1e-12
    spatial: str | None = None
    constants: PriorConstants = PriorConstants()


@dataclass
class ModelSpec:
    """Assembled model: responses, design blocks, penalty and random-effect structure.

    ``u_basis`` maps the latent random-effect block to per-unit effects
    (None means the identity, used by the proper independent/leroux
    priors; intrinsic blocks carry the sum-to-zero basis).
    """

    y: np.ndarray
    offset: np.ndarray
    Z: np.ndarray
    z_names: list[str]
    crossbasis: CrossBasis
    penalty: PenaltyAssembly
    unit_index: np.ndarray | None = None
    units: list | None = None
    spatial: SpatialPrior | None = None
    struct: StructureMatrix | None = None
    constants: PriorConstants = PriorConstants()
    u_basis: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.y)
        if self.Z.shape[0] != n or self.crossbasis.W.shape[0] != n or len(self.offset) != n:
            raise ValueError("y, offset, Z and the cross-basis must have the same number of rows")
        if self.spatial is not None:
            if self.unit_index is None or self.struct is None:
                raise ValueError("a spatial prior requires unit_index and a structure matrix")
            if len(self.unit_index) != n:
                raise ValueError("unit_index must have one entry per observation")
            if self.u_basis is None and self.spatial.kind in ("icar", "convolution"):
                T = constraint_basis(self.struct)
                if self.spatial.kind == "icar":
                    self.u_basis = T
                else:
                    self.u_basis = np.hstack([np.eye(self.struct.J), T])
        self._cache: dict = {}

    # -- dimensions ------------------------------------------------------
    @property
    def p1(self) -> int:
        return self.Z.shape[1]

    @property
    def K(self) -> int:
        return self.crossbasis.n_columns

    @property
    def J(self) -> int:
        return 0 if self.struct is None else self.struct.J

    @property
    def d_u(self) -> int:
        if self.spatial is None:
            return 0
        if self.u_basis is not None:
            return self.u_basis.shape[1]
        return self.J

    @property
    def dim(self) -> int:
        return self.p1 + self.K + self.d_u

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def sl_beta(self):
        return slice(0, self.p1)

    @property
    def sl_theta(self):
        return slice(self.p1, self.p1 + self.K)

    @property
    def sl_u(self):
        return slice(self.p1 + self.K, self.dim)

    @property
    def hyper_names(self) -> tuple[str, ...]:
        pen = {"lambda_x": "v_x", "lambda_l": "v_l", "lambda_ridge": "v_s"}
        names = [pen[n] for n in self.penalty.names]
        if self.spatial is not None:
            names += ["v_" + h for h in self.spatial.hyper_names]
        return tuple(names)

    # -- cached design pieces --------------------------------------------
    @property
    def X1(self) -> np.ndarray:
        """Dense [Z : W] block."""
        if "X1" not in self._cache:
            self._cache["X1"] = np.ascontiguousarray(np.hstack([self.Z, self.crossbasis.W]))
        return self._cache["X1"]

    @property
    def M(self) -> scipy.sparse.csr_matrix | None:
        """Latent-to-observation random-effect incidence (n x d_u)."""
        if self.spatial is None:
            return None
        if "M" not in self._cache:
            self._cache["M"] = scipy.sparse.csr_matrix(self.random_design())
        return self._cache["M"]

    @property
    def unit_aggregator(self) -> scipy.sparse.csr_matrix:
        """Sparse J x n matrix summing observation rows into units."""
        if "agg" not in self._cache:
            n = self.n_obs
            self._cache["agg"] = scipy.sparse.csr_matrix(
                (np.ones(n), (self.unit_index, np.arange(n))), shape=(self.J, n)
            )
        return self._cache["agg"]

    def random_design(self) -> np.ndarray:
        """Dense n x d_u random-effect design rows."""
        if self.spatial is None:
            return np.zeros((self.n_obs, 0))
        C = self.u_basis if self.u_basis is not None else np.eye(self.J)
        return C[self.unit_index, :]

    @property
    def H(self) -> np.ndarray:
        """Full dense design [Z : W : M]; built on demand for small models and tests."""
        if "H" not in self._cache:
            self._cache["H"] = np.ascontiguousarray(np.hstack([self.X1, self.random_design()]))
        return self._cache["H"]

    def eta(self, xi: np.ndarray) -> np.ndarray:
        """Linear predictor H xi + offset."""
        out = self.X1 @ xi[: self.p1 + self.K] + self.offset
        if self.d_u:
            xu = xi[self.sl_u]
            u_eff = xu if self.u_basis is None else self.u_basis @ xu
            out = out + u_eff[self.unit_index]
        return out

    def latent_G(self, hypers: "HyperVector") -> np.ndarray:
        """Random-effect precision over the latent block (dense d_u x d_u)."""
        if self.spatial is None:
            return np.zeros((0, 0))
        kind = self.spatial.kind
        J = self.J
        if kind == "independent":
            return hypers["tau"] * np.eye(J)
        if kind == "leroux":
            rho = hypers.rho
            return hypers["tau"] * (rho * self.struct.Lambda.toarray() + (1.0 - rho) * np.eye(J))
        TLT = self._tlt()
        if kind == "icar":
            return hypers["tau"] * TLT
        G = np.zeros((self.d_u, self.d_u))
        G[:J, :J] = hypers["tau1"] * np.eye(J)
        G[J:, J:] = hypers["tau2"] * TLT
        return G

    def _tlt(self) -> np.ndarray:
        if "TLT" not in self._cache:
            T = self.u_basis if self.spatial.kind == "icar" else self.u_basis[:, self.J :]
            self._cache["TLT"] = T.T @ (self.struct.Lambda.toarray() @ T)
        return self._cache["TLT"]


@dataclass(frozen=True)
class HyperVector:
    """Transformed hyperparameters (log penalties/precisions, logit correlation)."""

    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", vals)
        if vals.size != len(self.names):
            raise ValueError(f"expected {len(self.names)} hyperparameters, got {vals.size}")

    def v(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def __getitem__(self, short: str) -> float:
        """Natural-scale value: exp for penalties/precisions, logistic for rho."""
        v = self.v("v_" + short)
        return float(expit(v)) if short == "rho" else float(np.exp(v))

    @property
    def rho(self) -> float:
        return self["rho"]

    def penalty_weights(self, assembly: PenaltyAssembly) -> np.ndarray:
        order = {"lambda_x": "v_x", "lambda_l": "v_l", "lambda_ridge": "v_s"}
        return np.exp([self.v(order[n]) for n in assembly.names])

    def spatial_kwargs(self, prior: SpatialPrior) -> dict:
        return {h: self[h] for h in prior.hyper_names}


@dataclass
class InnerFit:
    """Mode of the conditional posterior with its local curvature factor."""

    xi: np.ndarray
    chol_lower: np.ndarray
    logdet_precision: float
    loglik: float
    logpost: float
    quad: float
    iterations: int
    grad_norm: float


@dataclass
class LatentFit:
    """Completed two-level fit: posterior mode, covariance factor, hyperparameters, diagnostics."""

    xi_hat: np.ndarray
    chol_sigma: np.ndarray
    chol_precision: np.ndarray
    hypers: HyperVector
    logpost: float
    newton_iters: int
    grad_norm: float
    converged: bool
    hyper_converged: bool
    n_hyper_evals: int
    model: ModelSpec


# ---------------------------------------------------------------------------
# model assembly


def build_model_spec(panel: PanelData, settings: ModelSettings) -> ModelSpec:
    """Assemble design blocks, penalty and spatial structure from panel data."""
    lagmat = build_lag_matrix(panel, settings.L)
    lo, hi = panel.exposure_range()
    if not lo < hi:
        raise ValueError("exposure has zero range; cannot place knots")
    exposure_knots = equidistant_knots(lo, hi, settings.v_x, settings.degree)
    lag_hi = max(settings.L, 1)
    lag_knots = equidistant_knots(0.0, float(lag_hi), settings.v_l, settings.degree)
    cb = build_crossbasis(lagmat, exposure_knots, lag_knots)

    rows = lagmat.panel_rows
    cols = [np.ones(rows.size)]
    names = ["intercept"]
    for name, col in panel.covariates.items():
        cols.append(np.asarray(col, dtype=float)[rows])
        names.append(name)
    Z = np.column_stack(cols)

    spatial = None
    struct = None
    unit_index = None
    if settings.spatial is not None:
        if panel.graph is None:
            raise ValueError(f"spatial prior {settings.spatial!r} requires an adjacency graph")
        spatial = SpatialPrior(settings.spatial)
        struct = structure_matrix(panel.graph)
        unit_index = lagmat.unit_index

    penalty = make_penalty_assembly(
        settings.v_x, settings.v_l, order=settings.diff_order, ridge=settings.ridge, jitter=settings.jitter
    )
    if np.any(panel.population[rows] <= 0):
        raise ValueError("population offsets must be positive")
    return ModelSpec(
        y=np.asarray(panel.y, dtype=float)[rows],
        offset=np.log(panel.population[rows].astype(float)),
        Z=Z,
        z_names=names,
        crossbasis=cb,
        penalty=penalty,
        unit_index=unit_index,
        units=list(panel.units),
        spatial=spatial,
        struct=struct,
        constants=settings.constants,
    )


def _as_hypers(spec: ModelSpec, hypers) -> HyperVector:
    if isinstance(hypers, HyperVector):
        return hypers
    return HyperVector(names=spec.hyper_names, values=np.asarray(hypers, dtype=float))


def build_Q(spec: ModelSpec, hypers) -> scipy.sparse.csr_matrix:
    """Latent prior precision blkdiag(zeta*I, P(lambda), G)."""
    hv = _as_hypers(spec, hypers)
    blocks = [spec.constants.zeta * scipy.sparse.identity(spec.p1)]
    P = assemble_penalty(spec.penalty, hv.penalty_weights(spec.penalty))
    blocks.append(scipy.sparse.csr_matrix(P))
    if spec.spatial is not None:
        blocks.append(scipy.sparse.csr_matrix(spec.latent_G(hv)))
    return scipy.sparse.block_diag(blocks, format="csr")


# ---------------------------------------------------------------------------
# conditional posterior of the latent vector


def _to_dense(Q) -> np.ndarray:
    return Q.toarray() if scipy.sparse.issparse(Q) else np.asarray(Q)


def log_cond_posterior(xi: np.ndarray, spec: ModelSpec, Q) -> float:
    """Poisson log-likelihood minus the Gaussian prior quadratic form (up to constants).

    Returns -inf when the linear predictor would overflow, so line
    searches backtrack instead of producing NaNs.
    """
    eta = spec.eta(xi)
    if np.max(eta) > ETA_OVERFLOW:
        return -np.inf
    mu = np.exp(eta)
    ll = float(spec.y @ eta - mu.sum())
    quad = float(xi @ (Q @ xi))
    return ll - 0.5 * quad


def _grad_blocks(spec: ModelSpec, resid: np.ndarray) -> np.ndarray:
    g = np.empty(spec.dim)
    g[: spec.p1 + spec.K] = spec.X1.T @ resid
    if spec.d_u:
        per_unit = np.bincount(spec.unit_index, weights=resid, minlength=spec.J)
        g[spec.sl_u] = per_unit if spec.u_basis is None else spec.u_basis.T @ per_unit
    return g


def gradient(xi: np.ndarray, spec: ModelSpec, Q) -> np.ndarray:
    """Analytic gradient H'(y - mu) - Q xi of the conditional log-posterior."""
    eta = spec.eta(xi)
    if np.max(eta) > ETA_OVERFLOW:
        raise ValueError("linear predictor overflow; gradient undefined at this point")
    mu = np.exp(eta)
    return _grad_blocks(spec, spec.y - mu) - Q @ xi


def _weighted_gram(spec: ModelSpec, mu: np.ndarray) -> np.ndarray:
    """Dense H' diag(mu) H assembled blockwise."""
    q = spec.p1 + spec.K
    A = np.empty((spec.dim, spec.dim))
    X1 = spec.X1
    Xw = X1 * mu[:, None]
    A[:q, :q] = X1.T @ Xw
    if spec.d_u:
        per_unit = np.bincount(spec.unit_index, weights=mu, minlength=spec.J)
        B = spec.unit_aggregator @ Xw
        C = spec.u_basis
        if C is None:
            A[:q, q:] = B.T
            A[q:, q:] = np.diag(per_unit)
        else:
            A[:q, q:] = B.T @ C
            A[q:, q:] = C.T @ (per_unit[:, None] * C)
        A[q:, :q] = A[:q, q:].T
    return A


def hessian(xi: np.ndarray, spec: ModelSpec, Q) -> np.ndarray:
    """Analytic Hessian -(H'VH + Q) of the conditional log-posterior (dense)."""
    eta = spec.eta(xi)
    if np.max(eta) > ETA_OVERFLOW:
        raise ValueError("linear predictor overflow; Hessian undefined at this point")
    mu = np.exp(eta)
    return -(_weighted_gram(spec, mu) + _to_dense(Q))


def default_start(spec: ModelSpec) -> np.ndarray:
    """Zero vector with the intercept set to the log mean rate."""
    xi0 = np.zeros(spec.dim)
    rate = float(np.mean(spec.y * np.exp(-spec.offset)))
    xi0[0] = np.log(max(rate, 1e-10))
    return xi0


def newton_mode(
    spec: ModelSpec,
    Q,
    xi0: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    max_halvings: int = 30,
) -> InnerFit:
    """Newton-Raphson with step halving on the conditional log-posterior.

    Convergence requires the sup-norm of the gradient to fall below
    tol * (1 + |xi|_inf); the returned Cholesky factor is evaluated
    exactly at the mode. A failing warm start falls back to the default
    start once before giving up.
    """
    try:
        return _newton_core(spec, Q, xi0, tol, max_iter, max_halvings)
    except NewtonError:
        if xi0 is None:
            raise
        return _newton_core(spec, Q, None, tol, max_iter, max_halvings)


def _newton_core(
    spec: ModelSpec,
    Q,
    xi0: np.ndarray | None,
    tol: float,
    max_iter: int,
    max_halvings: int,
) -> InnerFit:
    Qd = _to_dense(Q)
    xi = default_start(spec) if xi0 is None else np.array(xi0, dtype=float)
    f = log_cond_posterior(xi, spec, Qd)
    if not np.isfinite(f):
        raise NewtonError("starting point has non-finite log-posterior", xi=xi)

    for iteration in range(max_iter + 1):
        eta = spec.eta(xi)
        mu = np.exp(eta)
        g = _grad_blocks(spec, spec.y - mu) - Qd @ xi
        grad_norm = float(np.max(np.abs(g)))
        A = _weighted_gram(spec, mu) + Qd
        try:
            chol, _ = scipy.linalg.cho_factor(A, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NewtonError(
                f"Cholesky factorization failed at iteration {iteration} (invalid precision?)",
                xi=xi,
                grad_norm=grad_norm,
                iterations=iteration,
            ) from exc
        if grad_norm < tol * (1.0 + np.max(np.abs(xi))):
            loglik = float(spec.y @ eta - mu.sum())
            quad = float(xi @ (Qd @ xi))
            return InnerFit(
                xi=xi,
                chol_lower=np.tril(chol),
                logdet_precision=float(2.0 * np.sum(np.log(np.diag(chol)))),
                loglik=loglik,
                logpost=loglik - 0.5 * quad,
                quad=quad,
                iterations=iteration,
                grad_norm=grad_norm,
            )
        if iteration == max_iter:
            break
        direction = scipy.linalg.cho_solve((chol, True), g)
        # Inside the float-noise basin the true improvement (about half the
        # Newton decrement) is below the resolution of f; take the pure
        # Newton step, which contracts quadratically, instead of letting
        # rounding noise defeat the line search.
        predicted = 0.5 * float(g @ direction)
        noise = 16.0 * np.finfo(float).eps * (1.0 + abs(f))
        if predicted <= noise:
            xi = xi + direction
            f = log_cond_posterior(xi, spec, Qd)
            continue
        step = 1.0
        f_new = log_cond_posterior(xi + direction, spec, Qd)
        halvings = 0
        while f_new < f and halvings < max_halvings:
            step *= 0.5
            halvings += 1
            f_new = log_cond_posterior(xi + step * direction, spec, Qd)
        if f_new < f:
            raise NewtonError(
                f"line search failed after {max_halvings} halvings at iteration {iteration}",
                xi=xi,
                grad_norm=grad_norm,
                iterations=iteration,
            )
        xi = xi + step * direction
        f = f_new

    raise NewtonError(
        f"no convergence after {max_iter} iterations (grad norm {grad_norm:.3e})",
        xi=xi,
        grad_norm=grad_norm,
        iterations=max_iter,
    )


# ---------------------------------------------------------------------------
# marginal hyperparameter posterior


class WarmStart:
    """Mutable inner-mode cache threaded through outer objective evaluations."""

    def __init__(self):
        self.xi: np.ndarray | None = None
        self.evaluations: int = 0


def _gamma_mixture_term(v: float, nu: float, a: float, b: float) -> float:
    return 0.5 * nu * v - (0.5 * nu + a) * np.log(b + 0.5 * nu * np.exp(v))


def _random_effect_terms(spec: ModelSpec, hv: HyperVector) -> float:
    if spec.spatial is None:
        return 0.0
    c = spec.constants
    kw = hv.spatial_kwargs(spec.spatial)
    total = 0.5 * logdet_G(spec.spatial, spec.struct, **kw)
    for name in spec.spatial.hyper_names:
        if name == "rho":
            v_rho = hv.v("v_rho")
            total += 0.5 * v_rho - np.logaddexp(0.0, v_rho)
        else:
            total += _gamma_mixture_term(hv.v("v_" + name), c.nu, c.a, c.b)
    return float(total)


def _hyper_objective_at_mode(spec: ModelSpec, hv: HyperVector, inner: InnerFit) -> float:
    P = assemble_penalty(spec.penalty, hv.penalty_weights(spec.penalty))
    value = (
        inner.loglik
        + 0.5 * logdet_penalty(P)
        - 0.5 * inner.quad
        - 0.5 * inner.logdet_precision
    )
    c = spec.constants
    pen_names = {"lambda_x": "v_x", "lambda_l": "v_l", "lambda_ridge": "v_s"}
    for name in spec.penalty.names:
        value += _gamma_mixture_term(hv.v(pen_names[name]), c.nu, c.a, c.b)
    value += _random_effect_terms(spec, hv)
    return float(value)


def hyper_log_posterior(
    v,
    spec: ModelSpec,
    state: WarmStart | None = None,
    newton_tol: float = 1e-8,
) -> float:
    """Approximate marginal log-posterior of the transformed hyperparameters.

    The inner mode is recomputed at each evaluation, warm-started from
    the state's previous mode. Inner failures and points outside the
    transformed-hyperparameter box log a warning / return -inf so
    derivative-free optimizers back away.
    """
    values = np.atleast_1d(np.asarray(v, dtype=float))
    if not np.all(np.isfinite(values)) or np.any(np.abs(values) > V_BOUND):
        return -np.inf
    hv = _as_hypers(spec, values)
    Q = build_Q(spec, hv)
    xi0 = state.xi if state is not None and state.xi is not None else None
    try:
        inner = newton_mode(spec, Q, xi0=xi0, tol=newton_tol)
    except NewtonError as exc:
        logger.warning("inner Newton failed at v=%s: %s", np.array2string(values, precision=3), exc)
        return -np.inf
    if state is not None:
        state.xi = inner.xi
        state.evaluations += 1
    return _hyper_objective_at_mode(spec, hv, inner)


@dataclass
class HyperOptResult:
    hypers: HyperVector
    objective: float
    converged: bool
    n_evals: int


def optimize_hypers(
    spec: ModelSpec,
    v0=None,
    state: WarmStart | None = None,
    xatol: float = 1e-4,
    fatol: float = 1e-6,
    maxfev: int = 2000,
    newton_tol: float = 1e-8,
    trace: list | None = None,
) -> HyperOptResult:
    """Nelder-Mead maximization of the transformed hyperparameter posterior.

    Terminates when the simplex diameter falls below ``xatol`` and the
    objective spread below ``fatol``; hitting ``maxfev`` returns the best
    point seen with ``converged=False``.
    """
    names = spec.hyper_names
    x0 = np.zeros(len(names)) if v0 is None else np.asarray(v0, dtype=float)
    if x0.size != len(names):
        raise ValueError(f"v0 has size {x0.size}, expected {len(names)} for {names}")
    state = state if state is not None else WarmStart()

    def negative(v):
        value = hyper_log_posterior(v, spec, state=state, newton_tol=newton_tol)
        if trace is not None:
            trace.append({"v": np.array(v, dtype=float), "objective": value})
        return -value

    # Unit-sized initial simplex: the transformed scale is logarithmic, so
    # one unit is a natural exploration step (scipy's default perturbation
    # around a zero start is far too small and wastes evaluations).
    simplex = np.vstack([x0] + [x0 + np.eye(x0.size)[i] for i in range(x0.size)])
    res = scipy.optimize.minimize(
        negative,
        x0,
        method="Nelder-Mead",
        options={
            "xatol": xatol,
            "fatol": fatol,
            "maxfev": maxfev,
            "maxiter": maxfev,
            "initial_simplex": simplex,
        },
    )
    return HyperOptResult(
        hypers=HyperVector(names=names, values=np.asarray(res.x, dtype=float)),
        objective=-float(res.fun),
        converged=bool(res.success),
        n_evals=int(res.nfev),
    )


def fit(
    spec: ModelSpec,
    v0=None,
    newton_tol: float = 1e-8,
    xatol: float = 1e-4,
    fatol: float = 1e-6,
    maxfev: int = 2000,
    trace: list | None = None,
) -> LatentFit:
    """Two-level fit: optimize hyperparameters, then refit the mode at the optimum."""
    state = WarmStart()
    result = optimize_hypers(
        spec, v0=v0, state=state, xatol=xatol, fatol=fatol, maxfev=maxfev,
        newton_tol=newton_tol, trace=trace,
    )
    Q = build_Q(spec, result.hypers)
    inner = newton_mode(spec, Q, xi0=state.xi, tol=newton_tol)
    logpost = _hyper_objective_at_mode(spec, result.hypers, inner)

    # Sigma = (H'VH + Q)^{-1}, via the precision Cholesky; its own lower
    # Cholesky factor is what posterior sampling consumes.
    L = inner.chol_lower
    identity = np.eye(spec.dim)
    sigma = scipy.linalg.cho_solve((L, True), identity)
    sigma = 0.5 * (sigma + sigma.T)
    chol_sigma = scipy.linalg.cholesky(sigma, lower=True)

    return LatentFit(
        xi_hat=inner.xi,
        chol_sigma=chol_sigma,
        chol_precision=L,
        hypers=result.hypers,
        logpost=logpost,
        newton_iters=inner.iterations,
        grad_norm=inner.grad_norm,
        converged=bool(result.converged),
        hyper_converged=bool(result.converged),
        n_hyper_evals=result.n_evals,
        model=spec,
    )
