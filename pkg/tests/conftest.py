from __future__ import annotations

import os

os.environ.setdefault("VIEWCLUSTER_QUIET", "1")

import numpy as np
import pytest

from viewcluster.config import SynthConfig
from viewcluster.core import Dataset
from viewcluster.synth import generate


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth() -> Dataset:
    cfg = SynthConfig(identities=8, viewpoints=["front", "side", "rear"], dim=32,
                      samples_per_identity_viewpoint=6, seed=3)
    embeddings, meta = generate(cfg)
    return Dataset(embeddings, tuple(meta))
