from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from rich.console import Console
from scipy.special import softmax

from viewcluster.config import console_quiet
from viewcluster.core import NOISE, ClusterState, DimensionError, EmbeddingSet, normalize_rows

console = Console(quiet=console_quiet())

LOSS_FLOOR = 1e-30


@dataclass
class FeatureMemory:
    slots: np.ndarray
    beta: float
    degenerate_updates: int = 0

    def __post_init__(self) -> None:
        self.slots = np.array(self.slots, dtype=np.float64)
        if self.slots.ndim != 2 or self.slots.shape[0] < 1:
            raise DimensionError(f"memory needs a C x d slot matrix, got {self.slots.shape}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")

    @property
    def num_slots(self) -> int:
        return int(self.slots.shape[0])

    @property
    def d(self) -> int:
        return int(self.slots.shape[1])

    def copy(self) -> FeatureMemory:
        return FeatureMemory(self.slots.copy(), self.beta, self.degenerate_updates)


@dataclass(frozen=True)
class RecognitionResult:
    embeddings: EmbeddingSet
    memory: FeatureMemory
    epoch_losses: list[float] = field(default_factory=list)
    floor_events: int = 0


def _check_dim(mem: FeatureMemory, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    if f.shape[0] != mem.d:
        raise DimensionError(f"feature has dimension {f.shape[0]}, memory slots have {mem.d}")
    return f


def predict_prob(mem: FeatureMemory, f: np.ndarray) -> np.ndarray:
    f = _check_dim(mem, f)
    return softmax(mem.slots @ f / mem.beta)


def repelled_loss(p: np.ndarray, y: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < p.shape[0]:
        raise IndexError(f"class {y} outside 0..{p.shape[0] - 1}")
    p_y = float(p[y])
    if p_y < LOSS_FLOOR:
        console.print(f"[yellow]p[{y}]={p_y:.3g} clamped to {LOSS_FLOOR:g}[/yellow]")
        p_y = LOSS_FLOOR
    return max(0.0, -float(np.log(p_y)))


def loss_gradient(mem: FeatureMemory, f: np.ndarray, y: int) -> np.ndarray:
    p = predict_prob(mem, f)
    return (p @ mem.slots - mem.slots[y]) / mem.beta


def _update_slot_inplace(mem: FeatureMemory, y: int, f: np.ndarray) -> None:
    averaged = 0.5 * (mem.slots[y] + f)
    norm = float(np.linalg.norm(averaged))
    if norm == 0.0 or not np.isfinite(norm):
        mem.degenerate_updates += 1
        console.print(f"[yellow]Slot {y} update averaged to zero; kept previous slot.[/yellow]")
        return
    mem.slots[y] = averaged / norm


def update_slot(mem: FeatureMemory, y: int, f: np.ndarray) -> FeatureMemory:
    f = _check_dim(mem, f)
    if not 0 <= y < mem.num_slots:
        raise IndexError(f"slot {y} outside 0..{mem.num_slots - 1}")
    out = mem.copy()
    _update_slot_inplace(out, y, f)
    return out


def recognition_stage(
    embeddings: EmbeddingSet,
    epochs: int,
    beta: float,
    rate: float,
    quiet: bool = False,
) -> RecognitionResult:
    """Instance-level training surrogate: each sample is its own class.

    Samples are visited in ascending index order every epoch. Each one takes a
    gradient step on the repelled loss against the live memory, then its slot is
    moved halfway toward the stepped feature.
    """
    features = np.array(embeddings.data, dtype=np.float64)
    mem = FeatureMemory(features.copy(), beta)
    losses: list[float] = []
    floor_events = 0

    for epoch in range(epochs):
        total = 0.0
        for i in range(features.shape[0]):
            f = features[i]
            p = softmax(mem.slots @ f / beta)
            if p[i] < LOSS_FLOOR:
                floor_events += 1
            total += -float(np.log(max(p[i], LOSS_FLOOR)))
            grad = (p @ mem.slots - mem.slots[i]) / beta
            stepped = f - rate * grad
            norm = np.linalg.norm(stepped)
            if norm > 0:
                features[i] = stepped / norm
            _update_slot_inplace(mem, i, features[i])
        losses.append(total / features.shape[0])
        if not quiet:
            console.print(f"[dim]  recognition epoch {epoch + 1}/{epochs}: loss {losses[-1]:.4f}[/dim]")

    if floor_events and not quiet:
        console.print(f"[yellow]{floor_events} probabilities hit the loss floor.[/yellow]")
    return RecognitionResult(EmbeddingSet(features), mem, losses, floor_events)


def build_class_memory(embeddings: EmbeddingSet, state: ClusterState, beta: float) -> FeatureMemory:
    labels = state.labels
    if (labels == NOISE).any():
        raise ValueError("class memory needs every sample labeled")
    if labels.shape[0] != embeddings.n:
        raise DimensionError(f"{labels.shape[0]} labels for {embeddings.n} embeddings")
    num = int(labels.max()) + 1
    sums = np.zeros((num, embeddings.d), dtype=np.float64)
    np.add.at(sums, labels, embeddings.data)
    norms = np.linalg.norm(sums, axis=1)
    # a centroid that cancels out falls back to its first member
    for c in np.flatnonzero(norms == 0).tolist():
        members = np.flatnonzero(labels == c)
        sums[c] = embeddings.data[members[0]] if members.size else np.eye(1, embeddings.d)[0]
    return FeatureMemory(normalize_rows(sums), beta)


def refine_features(
    embeddings: EmbeddingSet, state: ClusterState, mem: FeatureMemory, rate: float
) -> EmbeddingSet:
    labels = state.labels
    if (labels == NOISE).any():
        raise ValueError("refine_features needs every sample labeled")
    if embeddings.d != mem.d:
        raise DimensionError(f"embeddings have dimension {embeddings.d}, memory {mem.d}")
    if labels.max() >= mem.num_slots:
        raise ValueError(f"label {int(labels.max())} has no memory slot (C={mem.num_slots})")
    if rate == 0:
        return embeddings
    features = embeddings.data
    probs = softmax(features @ mem.slots.T / mem.beta, axis=1)
    grads = (probs @ mem.slots - mem.slots[labels]) / mem.beta
    return EmbeddingSet(normalize_rows(features - rate * grads))
