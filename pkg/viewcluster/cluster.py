from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from itertools import combinations
from typing import Collection, Hashable, Mapping, Sequence

import numpy as np
from rich.console import Console
from scipy.spatial.distance import cdist
from sklearn.cluster import DBSCAN

from viewcluster.config import DbscanParams, PipelineConfig, console_quiet
from viewcluster.core import NOISE, VIEWPOINT_ORDER, ClusterState, EmbeddingSet, Viewpoint
from viewcluster.metric import (
    DistanceMatrix,
    MetricError,
    jaccard_from_embeddings,
    knn,
    pairwise_sq_euclidean,
)

console = Console(quiet=console_quiet())
_silent = Console(quiet=True)

GroupKey = Hashable


@dataclass(frozen=True)
class MergeCandidate:
    cluster_a: int
    cluster_b: int
    viewpoint_a: Viewpoint
    viewpoint_b: Viewpoint
    distance: float


@dataclass(frozen=True)
class TauResult:
    tau: float
    rank: int
    pair_count: int
    clamped: bool = False


@dataclass(frozen=True)
class NoiseSelection:
    state: ClusterState
    joined: int = 0
    formed: int = 0
    grown: int = 0
    singletons: int = 0
    # samples placed in clusters that noise selection created
    formed_members: tuple[int, ...] = ()


@dataclass(frozen=True)
class SecondPeriod:
    state: ClusterState
    candidates: list[MergeCandidate]
    merges: int = 0
    held_back: int = 0


def _out(quiet: bool) -> Console:
    return _silent if quiet else console


class UnionFind:
    """Disjoint sets over 0..size-1 with path compression and union by rank."""

    def __init__(self, size: int):
        self.parent = list(range(size))
        self.rank = [0] * size

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x: int, y: int) -> bool:
        px, py = self.find(x), self.find(y)
        if px == py:
            return False
        if self.rank[px] < self.rank[py]:
            px, py = py, px
        self.parent[py] = px
        if self.rank[px] == self.rank[py]:
            self.rank[px] += 1
        return True


def _unassigned(n: int) -> tuple[Viewpoint | None, ...]:
    return (None,) * n


def dbscan(
    dist: DistanceMatrix,
    params: DbscanParams,
    viewpoint_of: Sequence[Viewpoint | None] | None = None,
) -> ClusterState:
    if not dist.is_square:
        raise MetricError("dbscan needs a square distance matrix")
    viewpoint_of = _unassigned(dist.n) if viewpoint_of is None else viewpoint_of
    model = DBSCAN(eps=params.eps, min_samples=params.min_pts, metric="precomputed")
    labels = model.fit_predict(np.asarray(dist.values))
    return ClusterState(labels, tuple(viewpoint_of)).compact()


def adaptive_eps(dist: DistanceMatrix, quantile: float, fallback: float) -> float:
    upper = np.triu(dist.values, 1)
    values = np.sort(upper[np.nonzero(upper)], axis=None)
    top = int(np.round(quantile * values.size))
    if top < 1:
        return fallback
    return float(values[:top].mean())


def group_metrics(
    embeddings: EmbeddingSet,
    groups: Mapping[GroupKey, Sequence[int]],
    cfg: PipelineConfig,
) -> dict[GroupKey, DistanceMatrix]:
    metrics: dict[GroupKey, DistanceMatrix] = {}
    for key, indices in groups.items():
        subset = embeddings.subset(indices)
        if cfg.use_kreciprocal:
            metrics[key] = jaccard_from_embeddings(subset, min(cfg.k, subset.n))
        else:
            metrics[key] = pairwise_sq_euclidean(subset)
    return metrics


def _group_viewpoints(
    n: int, groups: Mapping[GroupKey, Sequence[int]]
) -> tuple[Viewpoint | None, ...]:
    out: list[Viewpoint | None] = [None] * n
    for key, indices in groups.items():
        if isinstance(key, Viewpoint):
            for i in indices:
                out[i] = key
    return tuple(out)


def first_period(
    embeddings: EmbeddingSet,
    partition: Mapping[GroupKey, Sequence[int]],
    cfg: PipelineConfig,
    metrics: Mapping[GroupKey, DistanceMatrix] | None = None,
    viewpoint_of: Sequence[Viewpoint | None] | None = None,
    quiet: bool = False,
) -> ClusterState:
    n = embeddings.n
    viewpoint_of = _group_viewpoints(n, partition) if viewpoint_of is None else viewpoint_of
    metrics = group_metrics(embeddings, partition, cfg) if metrics is None else metrics
    labels = np.full(n, NOISE, dtype=np.int64)
    offset = 0

    for key, indices in partition.items():
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            continue
        if idx.size == 1:
            labels[idx[0]] = offset
            offset += 1
            continue
        dist = metrics[key]
        eps = cfg.eps
        if cfg.eps_quantile is not None:
            eps = adaptive_eps(dist, cfg.eps_quantile, cfg.eps)
        local = dbscan(dist, DbscanParams(eps=eps, min_pts=cfg.min_pts)).labels
        clustered = local != NOISE
        labels[idx[clustered]] = local[clustered] + offset
        found = int(local.max()) + 1 if clustered.any() else 0
        offset += found
        _out(quiet).print(
            f"[dim]  {key}: {idx.size} samples, eps {eps:.3f}, "
            f"{found} clusters, {int((~clustered).sum())} noise[/dim]"
        )

    return ClusterState(labels, tuple(viewpoint_of))


def noise_to_singletons(state: ClusterState) -> ClusterState:
    labels = state.labels.copy()
    noise = labels == NOISE
    start = int(labels.max()) + 1 if (~noise).any() else 0
    labels[noise] = np.arange(start, start + int(noise.sum()))
    return state.with_labels(labels)


def noise_select(
    state: ClusterState,
    metrics: Mapping[GroupKey, DistanceMatrix],
    partition: Mapping[GroupKey, Sequence[int]],
    k_tilde: int,
    quiet: bool = False,
) -> NoiseSelection:
    """Resolve every DBSCAN noise sample against its nearest same-group neighbor.

    Noise samples are taken in ascending distance to their nearest neighbor p.
    A sample joins p's cluster when it sits in p's top k_tilde; if p is noise as
    well the pair seeds a new cluster that keeps absorbing reciprocal noise
    neighbors. Anything else becomes a singleton.
    """
    labels = state.labels.copy()
    next_label = int(labels.max()) + 1 if (labels != NOISE).any() else 0
    joined = formed = grown = singletons = 0
    formed_labels: set[int] = set()

    for key, indices in partition.items():
        group = np.asarray(indices, dtype=np.int64)
        noise_local = [i for i in range(group.size) if labels[group[i]] == NOISE]
        if not noise_local:
            continue
        if group.size == 1:
            labels[group[0]] = next_label
            next_label += 1
            singletons += 1
            continue

        dist = metrics[key]
        kt = min(k_tilde, group.size - 1)
        top = knn(dist, kt + 1).indices[:, 1:]
        top_sets = [set(row) for row in top.tolist()]
        nearest = top[:, 0]

        pending = set(noise_local)
        order = sorted(noise_local, key=lambda s: (dist.values[s, nearest[s]], s))
        for s in order:
            if s not in pending:
                continue
            pending.discard(s)
            p = int(nearest[s])
            reciprocal = s in top_sets[p]
            if reciprocal and labels[group[p]] != NOISE:
                labels[group[s]] = labels[group[p]]
                joined += 1
            elif reciprocal:
                label = next_label
                next_label += 1
                labels[group[[s, p]]] = label
                formed_labels.add(label)
                pending.discard(p)
                formed += 1
                queue = deque([s, p])
                while queue:
                    c = queue.popleft()
                    for cand in top[c].tolist():
                        if cand in pending and c in top_sets[cand]:
                            labels[group[cand]] = label
                            pending.discard(cand)
                            queue.append(cand)
                            grown += 1
            else:
                labels[group[s]] = next_label
                next_label += 1
                singletons += 1

    result = state.with_labels(labels)
    if result.has_noise:
        result = noise_to_singletons(result)
    _out(quiet).print(
        f"[dim]  noise selection: {joined} joined, {formed} new pairs "
        f"(+{grown} grown), {singletons} singletons[/dim]"
    )
    formed_members = tuple(np.flatnonzero(np.isin(labels, list(formed_labels))).tolist())
    return NoiseSelection(result, joined, formed, grown, singletons, formed_members)


def compute_tau(
    embeddings: EmbeddingSet,
    partition: Mapping[Viewpoint, Sequence[int]],
    ti: int,
    ti_quantile: float | None = None,
    quiet: bool = False,
) -> TauResult:
    keys = [vp for vp in VIEWPOINT_ORDER if partition.get(vp)]
    if len(keys) < 2:
        raise ValueError("tau needs samples from at least two viewpoints")
    blocks = [
        cdist(
            embeddings.data[np.asarray(partition[a])],
            embeddings.data[np.asarray(partition[b])],
            metric="sqeuclidean",
        ).ravel()
        for a, b in combinations(keys, 2)
    ]
    values = np.concatenate(blocks)
    count = int(values.size)
    rank = max(math.ceil(ti_quantile * count), 1) if ti_quantile is not None else ti
    if rank == 0:
        # nothing ranks below the first pair: same-viewpoint clustering only
        return TauResult(tau=0.0, rank=0, pair_count=count)
    clamped = rank > count
    if clamped:
        _out(quiet).print(
            f"[yellow]ti={rank} exceeds {count} cross-viewpoint pairs; using the largest pair.[/yellow]"
        )
        rank = count
    tau = float(np.partition(values, rank - 1)[rank - 1])
    return TauResult(tau=tau, rank=rank, pair_count=count, clamped=clamped)


def _cross_pairs_below(
    state: ClusterState, embeddings: EmbeddingSet, tau: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if embeddings.n != state.n:
        raise ValueError(f"{state.n} labels for {embeddings.n} embeddings")
    codes = np.array(
        [VIEWPOINT_ORDER.index(vp) if vp is not None else -1 for vp in state.viewpoint_of]
    )
    dist = pairwise_sq_euclidean(embeddings).values
    known = codes >= 0
    mask = (dist < tau) & (codes[:, None] != codes[None, :]) & known[:, None] & known[None, :]
    rows, cols = np.nonzero(np.triu(mask, 1))
    values = dist[rows, cols]
    order = np.lexsort((cols, rows, values))
    return rows[order], cols[order], values[order]


def rank_merge_candidates(
    state: ClusterState, embeddings: EmbeddingSet, tau: float
) -> list[MergeCandidate]:
    """Cluster pairs joined by a cross-viewpoint sample pair under tau, nearest first.

    Each pair appears once, at its single-linkage distance, with the viewpoints
    of the two samples that realize it.
    """
    rows, cols, values = _cross_pairs_below(state, embeddings, tau)
    labels = state.labels
    candidates: list[MergeCandidate] = []
    seen: set[tuple[int, int]] = set()
    for i, j, d in zip(rows.tolist(), cols.tolist(), values.tolist()):
        a, b = int(labels[i]), int(labels[j])
        if a == b or a == NOISE or b == NOISE:
            continue
        if a > b:
            a, b, i, j = b, a, j, i
        if (a, b) in seen:
            continue
        seen.add((a, b))
        candidates.append(
            MergeCandidate(a, b, state.viewpoint_of[i], state.viewpoint_of[j], d)
        )
    return candidates


def _nearest_partners(
    candidates: Sequence[MergeCandidate], guarded: Collection[int]
) -> dict[tuple[int, Viewpoint], int]:
    partners: dict[tuple[int, Viewpoint], int] = {}
    for c in candidates:
        for own, other, other_vp in (
            (c.cluster_a, c.cluster_b, c.viewpoint_b),
            (c.cluster_b, c.cluster_a, c.viewpoint_a),
        ):
            if own in guarded:
                partners.setdefault((own, other_vp), other)
    return partners


def _relabel_guarded(state: ClusterState, compact: ClusterState, guarded: Collection[int]) -> set[int]:
    out = set()
    for label in guarded:
        hits = np.flatnonzero(state.labels == label)
        if hits.size:
            out.add(int(compact.labels[hits[0]]))
    return out


def second_period(
    state: ClusterState,
    embeddings: EmbeddingSet,
    tau: float,
    guarded: Collection[int] = (),
    quiet: bool = False,
) -> SecondPeriod:
    """Merge clusters across viewpoints wherever a sample pair is closer than tau.

    Candidates are unioned transitively, nearest first. A cluster listed in
    ``guarded`` only merges with its nearest candidate in each other viewpoint,
    so it cannot bridge several clusters of one viewpoint.
    """
    if state.has_noise:
        raise ValueError("second period needs every sample labeled")
    compact = state.compact()
    guarded = _relabel_guarded(state, compact, guarded)
    candidates = rank_merge_candidates(compact, embeddings, tau)
    partners = _nearest_partners(candidates, guarded)

    uf = UnionFind(compact.num_clusters)
    merges = skipped = 0
    for c in candidates:
        if c.cluster_a in guarded and partners[(c.cluster_a, c.viewpoint_b)] != c.cluster_b:
            skipped += 1
            continue
        if c.cluster_b in guarded and partners[(c.cluster_b, c.viewpoint_a)] != c.cluster_a:
            skipped += 1
            continue
        if uf.union(c.cluster_a, c.cluster_b):
            merges += 1

    merged = np.array([uf.find(int(c)) for c in compact.labels.tolist()], dtype=np.int64)
    _out(quiet).print(
        f"[dim]  second period: {len(candidates)} candidate pairs under tau, "
        f"{merges} merges, {skipped} held back[/dim]"
    )
    return SecondPeriod(compact.with_labels(merged).compact(), candidates, merges, skipped)
