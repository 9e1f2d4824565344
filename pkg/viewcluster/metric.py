from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from viewcluster.core import DimensionError, EmbeddingSet

MetricTag = Literal["sq_euclidean", "jaccard"]


class MetricError(Exception):
    pass


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    metric: MetricTag

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise MetricError(f"distance matrix must be 2-D, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def is_square(self) -> bool:
        return self.values.shape[0] == self.values.shape[1]

    def submatrix(self, indices: Sequence[int] | np.ndarray) -> DistanceMatrix:
        idx = np.asarray(indices, dtype=np.int64)
        return DistanceMatrix(self.values[np.ix_(idx, idx)], self.metric)


@dataclass(frozen=True)
class NeighborLists:
    indices: np.ndarray
    distances: np.ndarray

    @property
    def n(self) -> int:
        return int(self.indices.shape[0])

    @property
    def k(self) -> int:
        return int(self.indices.shape[1])

    def prefix(self, m: int) -> np.ndarray:
        return self.indices[:, :m]

    def as_lists(self) -> list[list[int]]:
        return self.indices.tolist()


@dataclass(frozen=True)
class ExpandedSets:
    membership: np.ndarray

    @property
    def n(self) -> int:
        return int(self.membership.shape[0])

    def members(self, i: int) -> set[int]:
        return set(np.flatnonzero(self.membership[i]).tolist())


@dataclass(frozen=True)
class SparseWeights:
    values: np.ndarray

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def row(self, i: int) -> dict[int, float]:
        support = np.flatnonzero(self.values[i])
        return {int(j): float(self.values[i, j]) for j in support}


def pairwise_sq_euclidean(a: EmbeddingSet, b: EmbeddingSet | None = None) -> DistanceMatrix:
    same = b is None or b is a
    b = a if b is None else b
    if a.d != b.d:
        raise DimensionError(f"dimension mismatch: {a.d} vs {b.d}")
    values = cdist(a.data, b.data, metric="sqeuclidean")
    if same:
        np.fill_diagonal(values, 0.0)
    return DistanceMatrix(values, "sq_euclidean")


def knn(dist: DistanceMatrix, k: int) -> NeighborLists:
    if not dist.is_square:
        raise MetricError("knn needs a square distance matrix")
    if k < 1 or k > dist.n:
        raise MetricError(f"k={k} outside 1..{dist.n}")
    # self always ranks first; remaining ties resolve by ascending index
    keyed = np.array(dist.values)
    np.fill_diagonal(keyed, -np.inf)
    order = np.argsort(keyed, axis=1, kind="stable")[:, :k]
    return NeighborLists(order.astype(np.int64), np.take_along_axis(dist.values, order, axis=1))


def k_reciprocal_expand(nbrs: NeighborLists, k: int) -> ExpandedSets:
    """Grow each K_k(i) by every K_{k//2}(ind), ind in K_k(i), that overlaps K_k(i) by >= 2/3."""
    if k != nbrs.k:
        raise MetricError(f"neighbor lists hold {nbrs.k} entries, expected k={k}")
    if k < 2:
        raise MetricError("k-reciprocal expansion needs k >= 2")
    n = nbrs.n
    half = k // 2
    full = nbrs.indices
    short = full[:, :half]

    rows = np.arange(n)
    membership = np.zeros((n, n), dtype=bool)
    membership[rows[:, None], full] = True

    overlap = membership[rows[:, None, None], short[full]].sum(axis=2)
    qualifies = 3 * overlap >= 2 * half

    expanded = membership.copy()
    qi, qj = np.nonzero(qualifies)
    expanded[qi[:, None], short[full[qi, qj]]] = True
    return ExpandedSets(expanded)


def reweight(dist: DistanceMatrix, sets: ExpandedSets) -> SparseWeights:
    if dist.metric != "sq_euclidean":
        raise MetricError(f"reweight expects a sq_euclidean matrix, got {dist.metric}")
    if not dist.is_square or dist.n != sets.n:
        raise MetricError(f"matrix of size {dist.values.shape} does not match {sets.n} sets")
    weights = np.where(sets.membership, np.exp(-dist.values), 0.0)
    return SparseWeights(weights)


def jaccard_distance(w: SparseWeights) -> DistanceMatrix:
    weights = w.values
    n = w.n
    totals = weights.sum(axis=1)
    shared = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        support = np.flatnonzero(weights[i])
        if support.size:
            shared[i] = np.minimum(weights[:, support], weights[i, support]).sum(axis=1)

    # sum(max) = sum(a) + sum(b) - sum(min)
    union = totals[:, None] + totals[None, :] - shared
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(union > 0, 1.0 - shared / np.where(union > 0, union, 1.0), 1.0)
    values = np.clip(0.5 * (values + values.T), 0.0, 1.0)
    np.fill_diagonal(values, 0.0)
    return DistanceMatrix(values, "jaccard")


def jaccard_from_embeddings(embeddings: EmbeddingSet, k: int) -> DistanceMatrix:
    dist = pairwise_sq_euclidean(embeddings)
    k = min(k, dist.n)
    if k < 2:
        return DistanceMatrix(np.zeros((dist.n, dist.n)), "jaccard")
    sets = k_reciprocal_expand(knn(dist, k), k)
    return jaccard_distance(reweight(dist, sets))
