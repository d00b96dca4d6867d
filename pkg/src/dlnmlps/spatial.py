"""Spatial adjacency graphs and random-effect precision structures.

Four prior families over the per-unit random effects are supported:

* ``independent``: G = tau * I
* ``icar``: G = tau * Lambda (intrinsic, rank J - c)
* ``convolution``: an independent plus an intrinsic component,
  G = blkdiag(tau1 * I, tau2 * Lambda)
* ``leroux``: G = tau * (rho * Lambda + (1 - rho) * I), 0 <= rho < 1

Lambda is the graph structure matrix (degree on the diagonal, -1 between
neighbours). Its eigendecomposition is cached on the structure object so
log-determinants during hyperparameter search are O(J).
"""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

__all__ = [
    "SPATIAL_KINDS",
    "AdjacencyGraph",
    "StructureMatrix",
    "SpatialPrior",
    "load_adjacency",
    "structure_matrix",
    "precision",
    "logdet_G",
    "sample_spatial_effect",
    "constraint_basis",
]

SPATIAL_KINDS = ("independent", "icar", "convolution", "leroux")


@dataclass(frozen=True)
class AdjacencyGraph:
    """Symmetric neighbour structure over J spatial units (no self-loops)."""

    J: int
    neighbors: tuple[tuple[int, ...], ...]

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors], dtype=int)

    @property
    def n_edges(self) -> int:
        return int(self.degrees.sum()) // 2


class StructureMatrix:
    """Graph structure matrix Lambda with cached spectral quantities."""

    def __init__(self, Lambda: scipy.sparse.csr_matrix, degrees: np.ndarray):
        self.Lambda = Lambda
        self.degrees = np.asarray(degrees)
        self._eigh = None
        self._n_components = None

    @property
    def J(self) -> int:
        return self.Lambda.shape[0]

    @property
    def n_components(self) -> int:
        if self._n_components is None:
            adj = scipy.sparse.csr_matrix(
                (np.ones_like(self.Lambda.data), self.Lambda.indices, self.Lambda.indptr),
                shape=self.Lambda.shape,
            )
            self._n_components = int(connected_components(adj, directed=False)[0])
        return self._n_components

    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached eigendecomposition of the dense Lambda."""
        if self._eigh is None:
            vals, vecs = np.linalg.eigh(self.Lambda.toarray())
            self._eigh = (vals, vecs)
        return self._eigh

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.eigh()[0]

    def log_pseudo_det(self) -> float:
        """Sum of log nonzero eigenvalues (rank J - n_components)."""
        vals = self.eigenvalues
        rank = self.J - self.n_components
        positive = vals[np.argsort(vals)][self.J - rank :]
        return float(np.sum(np.log(positive)))

    def component_labels(self) -> np.ndarray:
        adj = scipy.sparse.csr_matrix(
            (np.ones_like(self.Lambda.data), self.Lambda.indices, self.Lambda.indptr),
            shape=self.Lambda.shape,
        )
        return connected_components(adj, directed=False)[1]


@dataclass(frozen=True)
class SpatialPrior:
    """Tagged random-effect prior family; which hyperparameters are active follows the kind."""

    kind: str

    def __post_init__(self):
        if self.kind not in SPATIAL_KINDS:
            raise ValueError(f"unknown spatial prior kind {self.kind!r}; expected one of {SPATIAL_KINDS}")

    @property
    def hyper_names(self) -> tuple[str, ...]:
        return {
            "independent": ("tau",),
            "icar": ("tau",),
            "convolution": ("tau1", "tau2"),
            "leroux": ("tau", "rho"),
        }[self.kind]


def load_adjacency(source) -> AdjacencyGraph:
    """Parse an adjacency edge list.

    Format: UTF-8 text, a required header line ``J <count>``, then one
    edge per line ``j h`` with 1-based unit ids. ``#`` starts a comment.
    Duplicate edges are idempotent; an edge given in only one direction
    is closed symmetrically with a warning.
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        text = Path(source).read_text(encoding="utf-8")
    elif isinstance(source, str):
        text = source
    elif isinstance(source, io.IOBase):
        text = source.read()
    else:
        text = str(source)

    J = None
    directed: set[tuple[int, int]] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if J is None:
            if parts[0].upper() != "J" or len(parts) != 2:
                raise ValueError(f'adjacency line {lineno}: expected header "J <count>", got {raw!r}')
            J = int(parts[1])
            if J < 1:
                raise ValueError(f"adjacency line {lineno}: J must be >= 1")
            continue
        if len(parts) != 2:
            raise ValueError(f'adjacency line {lineno}: expected edge "j h", got {raw!r}')
        j, h = int(parts[0]), int(parts[1])
        if j == h:
            raise ValueError(f"adjacency line {lineno}: self-loop on unit {j}")
        for node in (j, h):
            if not 1 <= node <= J:
                raise ValueError(f"adjacency line {lineno}: unit id {node} out of range 1..{J}")
        directed.add((j - 1, h - 1))
    if J is None:
        raise ValueError('adjacency input is missing the required "J <count>" header')

    one_way = {(j, h) for j, h in directed if (h, j) not in directed}
    if one_way:
        warnings.warn(
            f"{len(one_way)} adjacency edge(s) given in one direction only; symmetric closure applied",
            stacklevel=2,
        )
    undirected = {(min(j, h), max(j, h)) for j, h in directed}
    neighbors = [set() for _ in range(J)]
    for j, h in undirected:
        neighbors[j].add(h)
        neighbors[h].add(j)

    isolated = [i + 1 for i, n in enumerate(neighbors) if not n]
    if isolated:
        warnings.warn(f"{len(isolated)} isolated unit(s) with no neighbours: {isolated[:10]}", stacklevel=2)
    return AdjacencyGraph(J=J, neighbors=tuple(tuple(sorted(n)) for n in neighbors))


def grid_graph(side: int) -> AdjacencyGraph:
    """Rook-adjacency square lattice with side*side units."""
    if side < 1:
        raise ValueError("side must be >= 1")
    J = side * side
    neighbors = [[] for _ in range(J)]
    for r in range(side):
        for c in range(side):
            i = r * side + c
            if c + 1 < side:
                neighbors[i].append(i + 1)
                neighbors[i + 1].append(i)
            if r + 1 < side:
                neighbors[i].append(i + side)
                neighbors[i + side].append(i)
    return AdjacencyGraph(J=J, neighbors=tuple(tuple(sorted(n)) for n in neighbors))


def structure_matrix(g: AdjacencyGraph) -> StructureMatrix:
    """Lambda with degrees on the diagonal and -1 between neighbours."""
    rows, cols, vals = [], [], []
    for j, nbrs in enumerate(g.neighbors):
        rows.append(j)
        cols.append(j)
        vals.append(float(len(nbrs)))
        for h in nbrs:
            rows.append(j)
            cols.append(h)
            vals.append(-1.0)
    Lambda = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(g.J, g.J))
    return StructureMatrix(Lambda=Lambda, degrees=g.degrees)


def _require(kind: str, supplied: dict, active: tuple[str, ...]):
    for name, value in supplied.items():
        if value is not None and name not in active:
            raise ValueError(f"hyperparameter {name!r} is not active for the {kind!r} prior")
    for name in active:
        value = supplied.get(name)
        if value is None:
            raise ValueError(f"the {kind!r} prior requires hyperparameter {name!r}")
        if name == "rho":
            if not 0.0 <= value < 1.0:
                raise ValueError(f"rho must lie in [0, 1), got {value}")
        elif value <= 0:
            raise ValueError(f"{name} must be > 0, got {value}")


def precision(
    prior: SpatialPrior,
    struct: StructureMatrix,
    tau: float | None = None,
    tau1: float | None = None,
    tau2: float | None = None,
    rho: float | None = None,
) -> scipy.sparse.csr_matrix:
    """Random-effect precision G for the given prior family.

    The convolution prior returns the stacked 2J x 2J block diagonal over
    (independent, intrinsic) components.
    """
    supplied = {"tau": tau, "tau1": tau1, "tau2": tau2, "rho": rho}
    _require(prior.kind, supplied, prior.hyper_names)
    J = struct.J
    if prior.kind == "independent":
        return scipy.sparse.identity(J, format="csr") * tau
    if prior.kind == "icar":
        return (tau * struct.Lambda).tocsr()
    if prior.kind == "leroux":
        G = tau * (rho * struct.Lambda + (1.0 - rho) * scipy.sparse.identity(J))
        return G.tocsr()
    # convolution
    G1 = tau1 * scipy.sparse.identity(J)
    G2 = tau2 * struct.Lambda
    return scipy.sparse.block_diag([G1, G2], format="csr")


def logdet_G(
    prior: SpatialPrior,
    struct: StructureMatrix,
    tau: float | None = None,
    tau1: float | None = None,
    tau2: float | None = None,
    rho: float | None = None,
) -> float:
    """Log-determinant of G; generalized (pseudo) determinant for the intrinsic cases."""
    supplied = {"tau": tau, "tau1": tau1, "tau2": tau2, "rho": rho}
    _require(prior.kind, supplied, prior.hyper_names)
    J = struct.J
    if prior.kind == "independent":
        return J * float(np.log(tau))
    if prior.kind == "icar":
        rank = J - struct.n_components
        return rank * float(np.log(tau)) + struct.log_pseudo_det()
    if prior.kind == "leroux":
        vals = rho * struct.eigenvalues + (1.0 - rho)
        if np.any(vals <= 0):
            raise ValueError("Leroux precision is not positive definite; invalid hyperparameters")
        return J * float(np.log(tau)) + float(np.sum(np.log(vals)))
    rank = J - struct.n_components
    return J * float(np.log(tau1)) + rank * float(np.log(tau2)) + struct.log_pseudo_det()


def sample_spatial_effect(
    prior: SpatialPrior,
    struct: StructureMatrix,
    tau: float | None = None,
    rho: float | None = None,
    seed=None,
    size: int | None = None,
) -> np.ndarray:
    """Draw u ~ N(0, G^{-1}) for a proper prior (independent or leroux).

    Uses a Cholesky solve of the dense precision against standard
    normals, so a leroux draw at rho=0 reproduces the independent draw
    under the same seed.
    """
    if prior.kind not in ("independent", "leroux"):
        raise ValueError(f"sampling is not supported for the improper {prior.kind!r} prior")
    J = struct.J
    rng = np.random.default_rng(seed)
    n = 1 if size is None else int(size)
    z = rng.standard_normal((J, n))
    if prior.kind == "independent":
        _require(prior.kind, {"tau": tau, "rho": rho}, ("tau",))
        u = z / np.sqrt(tau)
    else:
        _require(prior.kind, {"tau": tau, "rho": rho}, ("tau", "rho"))
        G = tau * (rho * struct.Lambda.toarray() + (1.0 - rho) * np.eye(J))
        L = scipy.linalg.cholesky(G, lower=True)
        u = scipy.linalg.solve_triangular(L.T, z, lower=False)
    return u[:, 0] if size is None else u.T


def constraint_basis(struct: StructureMatrix) -> np.ndarray:
    """Orthonormal basis of the per-component sum-to-zero subspace.

    Returns a J x (J - c) matrix T with T'1 = 0 within each connected
    component; used to reparametrize intrinsic random-effect blocks.
    """
    labels = struct.component_labels()
    J = struct.J
    cols = []
    for comp in range(labels.max() + 1):
        idx = np.flatnonzero(labels == comp)
        m = idx.size
        if m == 1:
            continue
        local = scipy.linalg.null_space(np.ones((1, m)))
        block = np.zeros((J, m - 1))
        block[idx, :] = local
        cols.append(block)
    if not cols:
        return np.zeros((J, 0))
    return np.hstack(cols)
