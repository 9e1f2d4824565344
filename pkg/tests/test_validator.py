from __future__ import annotations

import numpy as np
import pytest

from viewcluster.core import EmbeddingSet, SampleMeta, Viewpoint
from viewcluster.validator import DatasetError, validate_dataset


def _meta(n: int, **overrides) -> list[SampleMeta]:
    vps = list(Viewpoint)
    return [
        SampleMeta(index=i, camera="c0", viewpoint=vps[i % 5], gt_id=f"id{i}", **overrides)
        for i in range(n)
    ]


@pytest.fixture
def unit_rows() -> EmbeddingSet:
    return EmbeddingSet.from_array(np.eye(3))


class TestValidateDataset:
    def test_well_formed(self, unit_rows):
        report = validate_dataset(unit_rows, _meta(3))
        assert report.ok
        report.raise_if_failed()

    def test_count_mismatch(self, unit_rows):
        report = validate_dataset(unit_rows, _meta(2))
        assert "count_mismatch" in report.kinds()

    def test_non_finite(self):
        rows = np.eye(3)
        rows[1, 2] = np.nan
        report = validate_dataset(EmbeddingSet.from_array(rows, normalize=False), _meta(3))
        assert report.kinds() == {"non_finite"}

    def test_zero_norm(self):
        rows = np.eye(3)
        rows[0] = 0.0
        report = validate_dataset(EmbeddingSet.from_array(rows), _meta(3))
        assert "zero_norm" in report.kinds()

    def test_not_normalized(self):
        report = validate_dataset(EmbeddingSet.from_array(2 * np.eye(3), normalize=False), _meta(3))
        assert report.kinds() == {"not_normalized"}

    def test_duplicate_index(self, unit_rows):
        meta = _meta(3)
        meta[2] = meta[2].model_copy(update={"index": 1})
        kinds = validate_dataset(unit_rows, meta).kinds()
        assert "duplicate_index" in kinds
        assert "non_contiguous_index" in kinds

    def test_gap_in_indices(self, unit_rows):
        meta = _meta(3)
        meta[2] = meta[2].model_copy(update={"index": 7})
        assert "non_contiguous_index" in validate_dataset(unit_rows, meta).kinds()

    def test_missing_train_viewpoint(self, unit_rows):
        meta = _meta(3)
        meta[0] = meta[0].model_copy(update={"viewpoint": None})
        assert validate_dataset(unit_rows, meta).kinds() == {"missing_viewpoint"}

    def test_missing_viewpoint_fine_outside_train(self, unit_rows):
        meta = _meta(3)
        meta[0] = meta[0].model_copy(update={"viewpoint": None, "split": "query"})
        assert validate_dataset(unit_rows, meta).ok

    def test_no_train_samples(self, unit_rows):
        assert "no_train_samples" in validate_dataset(unit_rows, _meta(3, split="gallery")).kinds()

    def test_raise_if_failed(self, unit_rows):
        with pytest.raises(DatasetError, match="count_mismatch"):
            validate_dataset(unit_rows, _meta(2)).raise_if_failed()
