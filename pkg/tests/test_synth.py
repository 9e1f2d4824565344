from __future__ import annotations

import numpy as np
import pytest

from viewcluster.config import SynthConfig
from viewcluster.core import Viewpoint
from viewcluster.metric import pairwise_sq_euclidean
from viewcluster.synth import SynthError, generate, inject_viewpoint_errors
from viewcluster.validator import validate_dataset


class TestGenerate:
    def test_degenerate_single_cluster(self):
        cfg = SynthConfig(identities=1, viewpoints=["front"], within_cluster_noise=1e-9,
                          samples_per_identity_viewpoint=5)
        emb, meta = generate(cfg)
        assert emb.n == 5
        assert np.abs(emb.data - emb.data[0]).max() <= 1e-6
        assert {m.viewpoint for m in meta} == {Viewpoint.FRONT}

    def test_viewpoint_dominates_identity(self):
        emb, meta = generate(SynthConfig())
        assert emb.n == 50 * 5 * 10
        dist = pairwise_sq_euclidean(emb).values
        ids = np.array([m.gt_id for m in meta])
        views = np.array([m.viewpoint.value for m in meta])
        same_id = ids[:, None] == ids[None, :]
        same_vp = views[:, None] == views[None, :]
        off_diag = ~np.eye(emb.n, dtype=bool)

        within = dist[same_id & same_vp & off_diag]
        same_view_other_id = dist[~same_id & same_vp]
        same_id_other_view = dist[same_id & ~same_vp]
        neither = dist[~same_id & ~same_vp]

        assert np.median(same_view_other_id) < np.median(same_id_other_view) < np.median(neither)
        assert within.max() < same_view_other_id.min()

    def test_deterministic_per_seed(self):
        cfg = SynthConfig(identities=4, dim=16, samples_per_identity_viewpoint=3)
        a, meta_a = generate(cfg)
        b, meta_b = generate(cfg)
        c, _ = generate(cfg.model_copy(update={"seed": 8}))
        assert np.array_equal(a.data, b.data)
        assert meta_a == meta_b
        assert not np.array_equal(a.data, c.data)

    def test_output_validates(self):
        emb, meta = generate(SynthConfig(identities=5, dim=16, samples_per_identity_viewpoint=2, test_identities=2))
        assert validate_dataset(emb, meta).ok

    def test_test_identities_split(self):
        cfg = SynthConfig(identities=2, test_identities=1, viewpoints=["front", "rear"], dim=8,
                          samples_per_identity_viewpoint=3)
        _, meta = generate(cfg)
        splits = [m.split for m in meta]
        assert splits.count("train") == 12
        assert splits.count("query") == 2
        assert splits.count("gallery") == 4
        assert all(m.gt_id == "t0" for m in meta if m.split != "train")

    def test_low_dimension_still_generates(self):
        emb, _ = generate(SynthConfig(identities=3, dim=4, samples_per_identity_viewpoint=2))
        assert emb.d == 4
        np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, atol=1e-9)


class TestInjectViewpointErrors:
    @pytest.fixture
    def thousand(self):
        _, meta = generate(SynthConfig(identities=20, dim=16, samples_per_identity_viewpoint=10))
        return meta

    def test_zero_rate(self, thousand):
        assert inject_viewpoint_errors(thousand, 0.0, seed=1) == thousand

    def test_full_rate_changes_every_label(self, thousand):
        out = inject_viewpoint_errors(thousand, 1.0, seed=1)
        assert all(a.viewpoint != b.viewpoint for a, b in zip(thousand, out))

    def test_exact_count(self, thousand):
        assert len(thousand) == 1000
        out = inject_viewpoint_errors(thousand, 0.5, seed=1)
        assert sum(a.viewpoint != b.viewpoint for a, b in zip(thousand, out)) == 500

    def test_other_fields_untouched(self, thousand):
        out = inject_viewpoint_errors(thousand, 0.3, seed=2)
        for a, b in zip(thousand, out):
            assert (a.index, a.gt_id, a.camera, a.split) == (b.index, b.gt_id, b.camera, b.split)

    def test_single_viewpoint_draws_from_all(self):
        _, meta = generate(SynthConfig(identities=3, viewpoints=["side"], dim=8, samples_per_identity_viewpoint=2))
        out = inject_viewpoint_errors(meta, 1.0, seed=0)
        assert all(m.viewpoint != Viewpoint.SIDE for m in out)

    def test_deterministic(self, thousand):
        assert inject_viewpoint_errors(thousand, 0.2, seed=5) == inject_viewpoint_errors(thousand, 0.2, seed=5)

    def test_rate_out_of_range(self, thousand):
        with pytest.raises(SynthError):
            inject_viewpoint_errors(thousand, 1.5, seed=0)
