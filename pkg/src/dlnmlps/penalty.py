"""Difference penalties, varying ridge lag penalty, and the assembled prior precision for the cross-basis coefficients.

The tensor-product coefficient block is penalized by
P(lambda) = lambda_x (S_x kron I_vl) + lambda_l (I_vx kron S_l)
optionally plus lambda_ridge (I_vx kron S_ridge), where each marginal
S = D'D + delta*I is jittered to full rank. Kronecker placement follows
the coefficient flattening with the lag index fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "DiffMatrix",
    "MarginalPenalty",
    "PenaltyAssembly",
    "diff_matrix",
    "marginal_penalty",
    "ridge_lag_penalty",
    "make_penalty_assembly",
    "assemble_penalty",
    "logdet_penalty",
]

DEFAULT_JITTER = 1e-12


@dataclass(frozen=True)
class DiffMatrix:
    """m-th order difference matrix of shape (n - m) x n."""

    order: int
    n: int
    values: np.ndarray


@dataclass(frozen=True)
class MarginalPenalty:
    """Symmetric positive-definite marginal penalty S = D'D + jitter*I (or a diagonal ridge)."""

    S: np.ndarray
    jitter: float = DEFAULT_JITTER

    @property
    def n(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class PenaltyAssembly:
    """Penalty components with their Kronecker placement over the coefficient block.

    ``components`` pairs a placement ("exposure" -> S kron I_vl,
    "lag" -> I_vx kron S) with a marginal penalty; ``placed`` caches the
    expanded dim x dim terms so assembly per hyperparameter evaluation is
    a scaled sum.
    """

    v_x: int
    v_l: int
    components: tuple[tuple[str, MarginalPenalty], ...]
    names: tuple[str, ...]
    placed: tuple[np.ndarray, ...] = field(repr=False, default=())

    def __post_init__(self):
        if not self.placed:
            object.__setattr__(self, "placed", tuple(self._place(p, m) for p, m in self.components))

    def _place(self, placement: str, marg: MarginalPenalty) -> np.ndarray:
        if placement == "exposure":
            if marg.n != self.v_x:
                raise ValueError(f"exposure marginal has size {marg.n}, expected {self.v_x}")
            return np.kron(marg.S, np.eye(self.v_l))
        if placement == "lag":
            if marg.n != self.v_l:
                raise ValueError(f"lag marginal has size {marg.n}, expected {self.v_l}")
            return np.kron(np.eye(self.v_x), marg.S)
        raise ValueError(f"unknown placement {placement!r}")

    @property
    def dim(self) -> int:
        return self.v_x * self.v_l

    @property
    def n_components(self) -> int:
        return len(self.components)


def diff_matrix(m: int, n: int) -> DiffMatrix:
    """m-th order difference matrix; m=2 rows follow the (1, -2, 1) pattern."""
    if m < 1:
        raise ValueError(f"difference order must be >= 1, got {m}")
    if n <= m:
        raise ValueError(f"need n > m, got n={n}, m={m}")
    values = np.diff(np.eye(n), n=m, axis=0)
    return DiffMatrix(order=m, n=n, values=values)


def marginal_penalty(D: DiffMatrix, jitter: float = DEFAULT_JITTER) -> MarginalPenalty:
    """Full-rank marginal penalty S = D'D + jitter*I."""
    if jitter <= 0:
        raise ValueError(f"jitter must be > 0, got {jitter}")
    S = D.values.T @ D.values + jitter * np.eye(D.n)
    return MarginalPenalty(S=S, jitter=jitter)


def ridge_lag_penalty(v_l: int, jitter: float = DEFAULT_JITTER) -> MarginalPenalty:
    """Quadratic varying ridge over the lag basis: diag(0, 1, 4, ..., (v_l-1)^2) + jitter*I.

    Shrinks the lag effect toward zero at longer delays.
    """
    if v_l < 1:
        raise ValueError(f"v_l must be >= 1, got {v_l}")
    weights = np.arange(v_l, dtype=float) ** 2
    return MarginalPenalty(S=np.diag(weights + jitter), jitter=jitter)


def make_penalty_assembly(
    v_x: int,
    v_l: int,
    order: int = 2,
    ridge: bool = True,
    jitter: float = DEFAULT_JITTER,
) -> PenaltyAssembly:
    """Standard penalty for a v_x x v_l cross-basis: two difference marginals plus an optional lag ridge."""
    S_x = marginal_penalty(diff_matrix(order, v_x), jitter)
    S_l = marginal_penalty(diff_matrix(order, v_l), jitter)
    components = [("exposure", S_x), ("lag", S_l)]
    names = ["lambda_x", "lambda_l"]
    if ridge:
        components.append(("lag", ridge_lag_penalty(v_l, jitter)))
        names.append("lambda_ridge")
    return PenaltyAssembly(v_x=v_x, v_l=v_l, components=tuple(components), names=tuple(names))


def assemble_penalty(assembly: PenaltyAssembly, lam) -> np.ndarray:
    """Dense P(lambda) = sum_c lambda_c K_c over the assembly's placed components."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.size != assembly.n_components:
        raise ValueError(f"expected {assembly.n_components} penalty weights, got {lam.size}")
    if np.any(lam <= 0):
        raise ValueError("all penalty weights must be > 0")
    P = np.zeros((assembly.dim, assembly.dim))
    for w, K in zip(lam, assembly.placed):
        P += w * K
    return P


def logdet_penalty(P: np.ndarray) -> float:
    """Log-determinant of a positive-definite penalty via its Cholesky factor."""
    try:
        chol = scipy.linalg.cholesky(P, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError("penalty matrix is not positive definite") from exc
    return float(2.0 * np.sum(np.log(np.diag(chol))))
