from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Literal, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

Split = Literal["train", "query", "gallery"]

NOISE = -1


class DimensionError(ValueError):
    pass


class Viewpoint(str, Enum):
    FRONT = "front"
    FRONT_SIDE = "front_side"
    SIDE = "side"
    REAR_SIDE = "rear_side"
    REAR = "rear"

    @classmethod
    def parse(cls, text: str) -> Viewpoint:
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"Unknown viewpoint: {text!r}") from None

    def __str__(self) -> str:
        return self.value


VIEWPOINT_ORDER: tuple[Viewpoint, ...] = tuple(Viewpoint)


class SampleMeta(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    index: int = Field(ge=0)
    camera: str
    viewpoint: Viewpoint | None = None
    gt_id: str | None = Field(default=None, alias="id")
    split: Split = "train"


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    """L2-normalize each row; rows with zero or non-finite norm are returned untouched."""
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    ok = np.isfinite(norms) & (norms > 0)
    safe = np.where(ok, norms, 1.0)
    return np.where(ok, rows / safe, rows)


@dataclass(frozen=True)
class EmbeddingSet:
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(
                f"EmbeddingSet needs an n x d matrix with n, d >= 1, got shape {arr.shape}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, rows: np.ndarray, normalize: bool = True) -> EmbeddingSet:
        rows = np.asarray(rows, dtype=np.float64)
        return cls(normalize_rows(rows) if normalize else rows)

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def d(self) -> int:
        return int(self.data.shape[1])

    def normalized(self) -> EmbeddingSet:
        return EmbeddingSet(normalize_rows(self.data))

    def subset(self, indices: Sequence[int] | np.ndarray) -> EmbeddingSet:
        return EmbeddingSet(self.data[np.asarray(indices, dtype=np.int64)])

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class ClusterState:
    labels: np.ndarray
    viewpoint_of: tuple[Viewpoint | None, ...]

    def __post_init__(self) -> None:
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if len(self.viewpoint_of) != labels.shape[0]:
            raise ValueError(
                f"labels ({labels.shape[0]}) and viewpoint_of "
                f"({len(self.viewpoint_of)}) disagree in length"
            )
        if labels.size and labels.min() < NOISE:
            raise ValueError("labels must be >= -1")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "viewpoint_of", tuple(self.viewpoint_of))

    @classmethod
    def from_members(
        cls,
        members: Mapping[int, Sequence[int]],
        viewpoint_of: Sequence[Viewpoint | None],
    ) -> ClusterState:
        labels = np.full(len(viewpoint_of), NOISE, dtype=np.int64)
        for label, idx in members.items():
            labels[np.asarray(idx, dtype=np.int64)] = label
        return cls(labels, tuple(viewpoint_of))

    @classmethod
    def singletons(cls, viewpoint_of: Sequence[Viewpoint | None]) -> ClusterState:
        return cls(np.arange(len(viewpoint_of), dtype=np.int64), tuple(viewpoint_of))

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def cluster_members(self) -> dict[int, list[int]]:
        members: dict[int, list[int]] = {}
        for idx, label in enumerate(self.labels.tolist()):
            if label != NOISE:
                members.setdefault(label, []).append(idx)
        return dict(sorted(members.items()))

    @property
    def num_clusters(self) -> int:
        return int(np.unique(self.labels[self.labels != NOISE]).size)

    def noise_indices(self) -> list[int]:
        return np.flatnonzero(self.labels == NOISE).tolist()

    @property
    def has_noise(self) -> bool:
        return bool((self.labels == NOISE).any())

    def with_labels(self, labels: np.ndarray) -> ClusterState:
        return ClusterState(labels, self.viewpoint_of)

    def compact(self) -> ClusterState:
        # dense 0..C-1 in order of first appearance; noise stays -1
        out = np.full(self.n, NOISE, dtype=np.int64)
        mask = self.labels != NOISE
        if mask.any():
            uniq, first, inverse = np.unique(
                self.labels[mask], return_index=True, return_inverse=True
            )
            rank = np.empty(uniq.size, dtype=np.int64)
            rank[np.argsort(first, kind="stable")] = np.arange(uniq.size)
            out[mask] = rank[inverse.reshape(-1)]
        return ClusterState(out, self.viewpoint_of)


def partition_by_viewpoint(meta: Sequence[SampleMeta]) -> dict[Viewpoint, list[int]]:
    groups: dict[Viewpoint, list[int]] = {}
    for m in sorted(meta, key=lambda m: m.index):
        if m.split != "train":
            continue
        if m.viewpoint is None:
            raise ValueError(f"Train sample {m.index} has no viewpoint")
        groups.setdefault(m.viewpoint, []).append(m.index)
    return {vp: groups[vp] for vp in VIEWPOINT_ORDER if vp in groups}


@dataclass(frozen=True)
class TrainView:
    embeddings: EmbeddingSet
    meta: tuple[SampleMeta, ...]
    source_index: tuple[int, ...]

    @property
    def viewpoints(self) -> tuple[Viewpoint | None, ...]:
        return tuple(m.viewpoint for m in self.meta)

    def gt_labels(self) -> np.ndarray | None:
        ids = [m.gt_id for m in self.meta]
        if any(i is None for i in ids):
            return None
        _, codes = np.unique(np.asarray(ids, dtype=object).astype(str), return_inverse=True)
        return codes.reshape(-1).astype(np.int64)


@dataclass(frozen=True)
class Dataset:
    embeddings: EmbeddingSet
    meta: tuple[SampleMeta, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "meta", tuple(sorted(self.meta, key=lambda m: m.index)))

    def with_meta(self, meta: Sequence[SampleMeta]) -> Dataset:
        return Dataset(self.embeddings, tuple(meta))

    def train_view(self) -> TrainView:
        train = [m for m in self.meta if m.split == "train"]
        rows = [m.index for m in train]
        local = tuple(m.model_copy(update={"index": i}) for i, m in enumerate(train))
        return TrainView(self.embeddings.subset(rows), local, tuple(rows))
