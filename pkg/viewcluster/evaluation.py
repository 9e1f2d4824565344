from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from rich.console import Console
from scipy.spatial.distance import cdist
from sklearn.metrics import adjusted_mutual_info_score

from viewcluster.config import AMI_NORMALIZER, console_quiet
from viewcluster.core import DimensionError, EmbeddingSet, SampleMeta

console = Console(quiet=console_quiet())

ProtocolMode = Literal["cross_camera", "all_gallery"]

DEFAULT_RANKS = (1, 5, 20)


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class RetrievalProtocol:
    mode: ProtocolMode = "cross_camera"

    def keep(self, query: SampleMeta, gallery: Sequence[SampleMeta]) -> np.ndarray:
        keep = np.array([g.index != query.index for g in gallery], dtype=bool)
        if self.mode == "cross_camera":
            junk = np.array(
                [g.camera == query.camera and g.gt_id == query.gt_id for g in gallery],
                dtype=bool,
            )
            keep &= ~junk
        return keep


class MetricsReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean_ap: float | None = None
    cmc: dict[int, float] = Field(default_factory=dict)
    ami: float | None = None
    iteration: int | None = None
    queries: int = 0
    excluded_queries: int = 0

    @field_validator("mean_ap")
    @classmethod
    def map_in_range(cls, v: float | None) -> float | None:
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError(f"mAP {v} outside [0, 1]")
        return v

    @field_validator("cmc")
    @classmethod
    def cmc_in_range(cls, v: dict[int, float]) -> dict[int, float]:
        for rank, value in v.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"CMC@{rank} = {value} outside [0, 1]")
        return v


def rank_gallery(
    query: np.ndarray,
    gallery: EmbeddingSet,
    protocol: RetrievalProtocol,
    query_meta: SampleMeta,
    gallery_meta: Sequence[SampleMeta],
) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != gallery.d:
        raise DimensionError(f"query has dimension {query.shape[0]}, gallery {gallery.d}")
    if len(gallery_meta) != gallery.n:
        raise EvaluationError(f"{len(gallery_meta)} gallery records for {gallery.n} rows")
    positions = np.flatnonzero(protocol.keep(query_meta, gallery_meta))
    if positions.size == 0:
        raise EvaluationError(f"query {query_meta.index}: gallery is empty after filtering")
    dist = cdist(query[None, :], gallery.data[positions], metric="sqeuclidean")[0]
    return positions[np.lexsort((positions, dist))]


def average_precision(ranking: Sequence[bool]) -> float:
    flags = np.asarray(ranking, dtype=bool)
    hits = np.flatnonzero(flags)
    if hits.size == 0:
        raise EvaluationError("average precision needs at least one relevant item")
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hits.mean())


def cmc(rankings: Sequence[Sequence[bool]], ranks: Sequence[int] = DEFAULT_RANKS) -> dict[int, float]:
    if not rankings:
        return {int(r): 0.0 for r in ranks}
    first_hits = []
    for ranking in rankings:
        hits = np.flatnonzero(np.asarray(ranking, dtype=bool))
        if hits.size == 0:
            raise EvaluationError("CMC needs every query to have a relevant item")
        first_hits.append(int(hits[0]) + 1)
    first = np.asarray(first_hits)
    return {int(r): float((first <= r).mean()) for r in ranks}


def ami(
    labels_a: Sequence[int] | np.ndarray,
    labels_b: Sequence[int] | np.ndarray,
    normalizer: AMI_NORMALIZER = "arithmetic",
) -> float:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise EvaluationError(f"labelings differ in shape: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise EvaluationError("AMI needs at least two samples")
    return float(adjusted_mutual_info_score(a, b, average_method=normalizer))


def evaluate_retrieval(
    embeddings: EmbeddingSet,
    meta: Sequence[SampleMeta],
    protocol: RetrievalProtocol,
    ranks: Sequence[int] = DEFAULT_RANKS,
    ami_value: float | None = None,
    iteration: int | None = None,
) -> MetricsReport:
    ordered = sorted(meta, key=lambda m: m.index)
    queries = [m for m in ordered if m.split == "query"]
    gallery = [m for m in ordered if m.split == "gallery"]
    if not queries or not gallery:
        raise EvaluationError(
            f"need query and gallery samples, got {len(queries)} and {len(gallery)}"
        )
    if any(m.gt_id is None for m in queries + gallery):
        raise EvaluationError("retrieval evaluation needs an id on every query and gallery sample")

    gallery_set = embeddings.subset([m.index for m in gallery])
    gallery_ids = np.array([m.gt_id for m in gallery], dtype=object)

    rankings: list[np.ndarray] = []
    excluded = 0
    for q in queries:
        order = rank_gallery(embeddings.data[q.index], gallery_set, protocol, q, gallery)
        relevant = gallery_ids[order] == q.gt_id
        if not relevant.any():
            excluded += 1
            console.print(f"[yellow]Query {q.index} has no valid match; excluded.[/yellow]")
            continue
        rankings.append(relevant)

    if not rankings:
        raise EvaluationError("no query has a valid match in the gallery")

    mean_ap = float(np.mean([average_precision(r) for r in rankings]))
    return MetricsReport(
        mean_ap=mean_ap,
        cmc=cmc(rankings, ranks),
        ami=ami_value,
        iteration=iteration,
        queries=len(rankings),
        excluded_queries=excluded,
    )
