from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from viewcluster.config import SynthConfig
from viewcluster.core import VIEWPOINT_ORDER, EmbeddingSet, SampleMeta, Viewpoint, normalize_rows


class SynthError(Exception):
    pass


def _directions(
    rng: np.random.Generator, cfg: SynthConfig, n_identities: int
) -> tuple[np.ndarray, np.ndarray]:
    n_views = len(cfg.viewpoints)
    if cfg.dim <= n_views:
        offsets = normalize_rows(rng.standard_normal((n_views, cfg.dim)))
        centers = normalize_rows(rng.standard_normal((n_identities, cfg.dim)))
        return offsets * cfg.viewpoint_offset_scale, centers * cfg.identity_spread

    basis, _ = np.linalg.qr(rng.standard_normal((cfg.dim, cfg.dim)))
    offsets = basis[:, :n_views].T
    free = basis[:, n_views:]
    if n_identities <= free.shape[1]:
        centers = free[:, :n_identities].T
    else:
        # more identities than free axes: random unit directions orthogonal to the offsets
        coeff = normalize_rows(rng.standard_normal((n_identities, free.shape[1])))
        centers = coeff @ free.T
    return offsets * cfg.viewpoint_offset_scale, centers * cfg.identity_spread


def generate(cfg: SynthConfig) -> tuple[EmbeddingSet, list[SampleMeta]]:
    if not (cfg.viewpoint_offset_scale > cfg.identity_spread > cfg.within_cluster_noise > 0):
        raise SynthError(
            "spreads must satisfy viewpoint_offset_scale > identity_spread > within_cluster_noise > 0"
        )
    viewpoints = [Viewpoint.parse(v) for v in cfg.viewpoints]
    total = cfg.identities + cfg.test_identities
    rng = np.random.default_rng(cfg.seed)
    offsets, centers = _directions(rng, cfg, total)

    per_id = len(viewpoints) * cfg.samples_per_identity_viewpoint
    n = total * per_id
    identity = np.repeat(np.arange(total), per_id)
    view = np.tile(np.repeat(np.arange(len(viewpoints)), cfg.samples_per_identity_viewpoint), total)
    noise = rng.normal(0.0, cfg.within_cluster_noise / math.sqrt(cfg.dim), size=(n, cfg.dim))
    rows = centers[identity] + offsets[view] + noise
    cameras = rng.integers(0, cfg.cameras, size=n)

    meta: list[SampleMeta] = []
    for i in range(n):
        ident = int(identity[i])
        if ident < cfg.identities:
            gt_id, split = f"id{ident:03d}", "train"
        else:
            first = i % cfg.samples_per_identity_viewpoint == 0
            gt_id, split = f"t{ident - cfg.identities}", "query" if first else "gallery"
        meta.append(
            SampleMeta(
                index=i,
                camera=f"c{int(cameras[i])}",
                viewpoint=viewpoints[int(view[i])],
                gt_id=gt_id,
                split=split,
            )
        )
    return EmbeddingSet.from_array(rows), meta


def inject_viewpoint_errors(
    meta: Sequence[SampleMeta], error_rate: float, seed: int
) -> list[SampleMeta]:
    if not 0.0 <= error_rate <= 1.0:
        raise SynthError(f"error_rate must be in [0, 1], got {error_rate}")
    out = list(meta)
    train = [i for i, m in enumerate(out) if m.split == "train" and m.viewpoint is not None]
    count = math.floor(error_rate * len(train) + 1e-9)
    if count == 0:
        return out

    present = [vp for vp in VIEWPOINT_ORDER if any(out[i].viewpoint == vp for i in train)]
    pool = present if len(present) >= 2 else list(VIEWPOINT_ORDER)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(train), size=count, replace=False))
    for pos in chosen.tolist():
        i = train[pos]
        options = [vp for vp in pool if vp != out[i].viewpoint]
        wrong = options[int(rng.integers(len(options)))]
        out[i] = out[i].model_copy(update={"viewpoint": wrong})
    return out
