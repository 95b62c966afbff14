"""Spatial weights and Moran's I permutation diagnostics.

The weights matrix is built from an undirected adjacency edge list over
municipality centroids. Nodes left isolated by the edge list are repaired
by adding k nearest-neighbor links (Euclidean centroid distance), the
relation is symmetrized, and rows are standardized to sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .errors import NumericalError, ValidationError

__all__ = [
    "SpatialGraph",
    "WeightsMatrix",
    "MoranResult",
    "build_weights",
    "pairwise_distances_km",
    "morans_i",
    "morans_perm_test",
    "multivariate_morans_i",
]

DEFAULT_KNN = 3
DEFAULT_PERMUTATIONS = 999


@dataclass
class SpatialGraph:
    """Ordered node ids, undirected edges, and projected centroids in meters."""

    nodes: list[str]
    edges: list[tuple[str, str]]
    centroids: dict[str, tuple[float, float]]

    def __post_init__(self) -> None:
        if len(set(self.nodes)) != len(self.nodes):
            dupes = sorted({n for n in self.nodes if self.nodes.count(n) > 1})
            raise ValidationError(f"duplicate node ids: {dupes[:5]}")
        known = set(self.nodes)
        missing = [n for n in self.nodes if n not in self.centroids]
        if missing:
            raise ValidationError(f"nodes without centroids: {missing[:5]}")
        for a, b in self.edges:
            if a == b:
                raise ValidationError(f"self-loop edge on node {a}")
            if a not in known or b not in known:
                raise ValidationError(f"edge references unknown node: ({a}, {b})")

    @property
    def n(self) -> int:
        return len(self.nodes)

    def coords(self) -> np.ndarray:
        return np.asarray([self.centroids[n] for n in self.nodes], dtype=float)


@dataclass
class WeightsMatrix:
    """Row-standardized sparse spatial weights aligned to ``nodes``."""

    nodes: list[str]
    w: sparse.csr_matrix
    repair_edges: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def s0(self) -> float:
        return float(self.w.sum())

    def index_of(self, node: str) -> int:
        return self.nodes.index(node)

    def dense(self) -> np.ndarray:
        return self.w.toarray()


class MoranResult(NamedTuple):
    statistic: float
    p_value: float
    n_permutations: int
    seed: int


def pairwise_distances_km(graph: SpatialGraph) -> np.ndarray:
    """Symmetric Euclidean centroid distances in kilometers."""
    xy = graph.coords()
    return cdist(xy, xy) / 1000.0


def _knn_candidates(dist_row: np.ndarray, self_idx: int, k: int) -> list[int]:
    # Ties in distance resolved by node order: stable sort on (distance, index).
    order = np.lexsort((np.arange(dist_row.size), dist_row))
    picked = [int(j) for j in order if j != self_idx][:k]
    return picked


def build_weights(graph: SpatialGraph, k: int = DEFAULT_KNN) -> WeightsMatrix:
    """Queen-style adjacency with a KNN plug-in for isolates.

    Isolates under the input edge list gain edges to their k nearest
    centroids; the neighbor relation is symmetrized after all additions and
    then row-standardized. Raises when k < 1 or k >= node count.
    """
    n = graph.n
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ValidationError(f"k={k} must be smaller than the node count {n}")
    idx = {node: i for i, node in enumerate(graph.nodes)}
    adj: set[tuple[int, int]] = set()
    for a, b in graph.edges:
        i, j = idx[a], idx[b]
        adj.add((i, j))
        adj.add((j, i))
    degree = np.zeros(n, dtype=int)
    for i, _ in adj:
        degree[i] += 1
    repair: list[tuple[str, str]] = []
    if (degree == 0).any():
        dist = cdist(graph.coords(), graph.coords())
        for i in np.flatnonzero(degree == 0):
            for j in _knn_candidates(dist[i], int(i), k):
                adj.add((int(i), j))
                adj.add((j, int(i)))
                repair.append((graph.nodes[int(i)], graph.nodes[j]))
    rows = np.array([i for i, _ in adj], dtype=int)
    cols = np.array([j for _, j in adj], dtype=int)
    data = np.ones(len(rows), dtype=float)
    binary = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
    binary.data[:] = 1.0
    row_sums = np.asarray(binary.sum(axis=1)).ravel()
    inv = np.divide(1.0, row_sums, out=np.zeros_like(row_sums), where=row_sums > 0)
    w = sparse.diags(inv) @ binary
    return WeightsMatrix(nodes=list(graph.nodes), w=w.tocsr(), repair_edges=repair)


def _moran_statistic(z: np.ndarray, w: sparse.csr_matrix, s0: float) -> float:
    n = z.shape[0]
    denom = float(z @ z)
    return (n / s0) * float(z @ (w @ z)) / denom


def morans_i(values: Sequence[float], weights: WeightsMatrix) -> float:
    """Global Moran's I: (n / S0) * (z' W z) / (z' z) with z demeaned.

    Raises :class:`NumericalError` for constant input (zero variance).
    """
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.shape[0] != weights.n:
        raise ValidationError(
            f"values must be a vector of length {weights.n}, got shape {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise ValidationError("values must be finite")
    z = x - x.mean()
    if np.allclose(z, 0.0):
        raise NumericalError("Moran's I undefined for a constant vector")
    return _moran_statistic(z, weights.w, weights.s0)


def morans_perm_test(
    values: Sequence[float],
    weights: WeightsMatrix,
    n_perm: int = DEFAULT_PERMUTATIONS,
    seed: int = 0,
) -> MoranResult:
    """Two-sided permutation test for Moran's I with add-one correction.

    p = (1 + #{|I*| >= |I_obs|}) / (1 + n_perm) over uniform relabelings of
    the values across nodes.
    """
    if n_perm < 99:
        raise ValidationError(f"n_perm must be >= 99, got {n_perm}")
    observed = morans_i(values, weights)
    x = np.asarray(values, dtype=float)
    z = x - x.mean()
    rng = np.random.default_rng(seed)
    s0 = weights.s0
    count = 0
    for _ in range(n_perm):
        zp = rng.permutation(z)
        if abs(_moran_statistic(zp, weights.w, s0)) >= abs(observed):
            count += 1
    p = (1 + count) / (1 + n_perm)
    return MoranResult(statistic=observed, p_value=p, n_permutations=n_perm, seed=seed)


def _multivariate_statistic(z: np.ndarray, w: sparse.csr_matrix, s0: float) -> float:
    n = z.shape[0]
    num = float(np.sum(z * (w @ z)))
    den = float(np.sum(z * z))
    return (n / s0) * num / den


def multivariate_morans_i(
    residual_matrix: np.ndarray,
    weights: WeightsMatrix,
    n_perm: int = DEFAULT_PERMUTATIONS,
    seed: int = 0,
) -> MoranResult:
    """Trace-form multivariate Moran's I with joint row permutations.

    Statistic: (n / S0) * trace(Z' W Z) / trace(Z' Z) with Z column-demeaned.
    Constant columns raise :class:`NumericalError` naming the column.
    """
    z = np.asarray(residual_matrix, dtype=float)
    if z.ndim != 2:
        raise ValidationError("residual_matrix must be 2-dimensional")
    if z.shape[0] != weights.n:
        raise ValidationError(
            f"residual_matrix must have {weights.n} rows, got {z.shape[0]}"
        )
    if n_perm < 99:
        raise ValidationError(f"n_perm must be >= 99, got {n_perm}")
    z = z - z.mean(axis=0, keepdims=True)
    spans = np.max(np.abs(z), axis=0)
    degenerate = np.flatnonzero(spans == 0.0)
    if degenerate.size:
        raise NumericalError(
            f"residual column {int(degenerate[0])} is constant (zero variance)"
        )
    s0 = weights.s0
    observed = _multivariate_statistic(z, weights.w, s0)
    rng = np.random.default_rng(seed)
    count = 0
    for _ in range(n_perm):
        zp = z[rng.permutation(z.shape[0])]
        if abs(_multivariate_statistic(zp, weights.w, s0)) >= abs(observed):
            count += 1
    p = (1 + count) / (1 + n_perm)
    return MoranResult(statistic=observed, p_value=p, n_permutations=n_perm, seed=seed)
