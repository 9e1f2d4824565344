from __future__ import annotations

import math

import numpy as np
import pytest

from viewcluster.core import ClusterState, DimensionError, EmbeddingSet, normalize_rows
from viewcluster.memory import (
    FeatureMemory,
    build_class_memory,
    loss_gradient,
    predict_prob,
    recognition_stage,
    refine_features,
    repelled_loss,
    update_slot,
)


def _loss(mem: FeatureMemory, f: np.ndarray, y: int) -> float:
    return repelled_loss(predict_prob(mem, f), y)


@pytest.fixture
def two_slots() -> FeatureMemory:
    return FeatureMemory(np.array([[1.0, 0.0], [0.0, 1.0]]), beta=1.0)


class TestPredictProb:
    def test_single_slot(self):
        mem = FeatureMemory(np.array([[0.6, 0.8]]), beta=0.1)
        np.testing.assert_allclose(predict_prob(mem, np.array([1.0, 0.0])), [1.0])

    def test_orthonormal_beta_one(self, two_slots):
        p = predict_prob(two_slots, np.array([1.0, 0.0]))
        np.testing.assert_allclose(p, [0.731059, 0.268941], atol=1e-6)

    def test_orthonormal_beta_small(self):
        mem = FeatureMemory(np.eye(2), beta=0.1)
        p = predict_prob(mem, np.array([1.0, 0.0]))
        assert p[0] == pytest.approx(math.exp(10) / (math.exp(10) + 1), abs=1e-7)

    def test_no_overflow_at_tiny_temperature(self, rng):
        mem = FeatureMemory(normalize_rows(rng.normal(size=(30, 8))), beta=1e-4)
        p = predict_prob(mem, mem.slots[3])
        assert np.all(np.isfinite(p))
        assert p.sum() == pytest.approx(1.0, abs=1e-9)

    def test_shift_invariance(self, rng):
        slots = normalize_rows(rng.normal(size=(12, 5)))
        f = normalize_rows(rng.normal(size=(1, 5)))[0]
        p = predict_prob(FeatureMemory(slots, beta=0.5), f)
        shifted = np.exp(slots @ f / 0.5 + 7.0)
        assert np.abs(p - shifted / shifted.sum()).max() <= 1e-12

    def test_dimension_mismatch(self, two_slots):
        with pytest.raises(DimensionError):
            predict_prob(two_slots, np.ones(3))


class TestRepelledLoss:
    def test_certain(self):
        assert repelled_loss(np.array([1.0, 0.0]), 0) == 0.0

    def test_half(self):
        assert repelled_loss(np.array([0.5, 0.5]), 1) == pytest.approx(0.693147, abs=1e-6)

    def test_uniform(self):
        assert repelled_loss(np.full(7, 1 / 7), 3) == pytest.approx(math.log(7))

    def test_zero_probability_clamped(self):
        assert repelled_loss(np.array([1.0, 0.0]), 1) == pytest.approx(-math.log(1e-30))


class TestLossGradient:
    def test_single_slot_zero(self):
        mem = FeatureMemory(np.array([[0.0, 1.0]]), beta=0.3)
        np.testing.assert_array_equal(loss_gradient(mem, np.array([1.0, 0.0]), 0), [0.0, 0.0])

    def test_closed_form(self, two_slots):
        p = predict_prob(two_slots, np.array([1.0, 0.0]))
        grad = loss_gradient(two_slots, np.array([1.0, 0.0]), 0)
        np.testing.assert_allclose(grad, [p[0] - 1.0, p[1]])

    def test_finite_differences(self, rng):
        h = 1e-5
        for _ in range(100):
            d = int(rng.integers(2, 17))
            c = int(rng.integers(1, 33))
            mem = FeatureMemory(normalize_rows(rng.normal(size=(c, d))), beta=float(rng.uniform(0.2, 1.0)))
            f = normalize_rows(rng.normal(size=(1, d)))[0]
            y = int(rng.integers(c))
            grad = loss_gradient(mem, f, y)
            numeric = np.array(
                [(_loss(mem, f + h * e, y) - _loss(mem, f - h * e, y)) / (2 * h) for e in np.eye(d)]
            )
            scale = max(np.linalg.norm(numeric), 1e-3)
            assert np.linalg.norm(grad - numeric) / scale < 1e-4


class TestUpdateSlot:
    def test_fixed_point(self, two_slots):
        out = update_slot(two_slots, 0, np.array([1.0, 0.0]))
        np.testing.assert_array_equal(out.slots, two_slots.slots)

    def test_average_renormalized(self, two_slots):
        out = update_slot(two_slots, 0, np.array([0.0, 1.0]))
        np.testing.assert_allclose(out.slots[0], [math.sqrt(2) / 2, math.sqrt(2) / 2])

    def test_other_slots_bitwise_stable(self, rng):
        mem = FeatureMemory(normalize_rows(rng.normal(size=(6, 4))), beta=0.1)
        out = update_slot(mem, 2, normalize_rows(rng.normal(size=(1, 4)))[0])
        keep = [0, 1, 3, 4, 5]
        assert np.array_equal(out.slots[keep], mem.slots[keep])
        assert np.linalg.norm(out.slots[2]) == pytest.approx(1.0, abs=1e-6)

    def test_converges_to_constant_feature(self, two_slots):
        target = np.array([0.0, 1.0])
        mem = two_slots
        gaps = []
        for _ in range(30):
            mem = update_slot(mem, 0, target)
            gaps.append(np.linalg.norm(mem.slots[0] - target))
        assert gaps[-1] < 1e-6
        assert all(b <= a for a, b in zip(gaps, gaps[1:]))

    def test_degenerate_keeps_slot(self, two_slots):
        out = update_slot(two_slots, 0, np.array([-1.0, 0.0]))
        np.testing.assert_array_equal(out.slots[0], [1.0, 0.0])
        assert out.degenerate_updates == 1
        assert two_slots.degenerate_updates == 0


class TestRecognitionStage:
    def test_zero_epochs(self, rng):
        emb = EmbeddingSet.from_array(rng.normal(size=(10, 4)))
        result = recognition_stage(emb, 0, beta=0.1, rate=0.01, quiet=True)
        np.testing.assert_array_equal(result.embeddings.data, emb.data)
        np.testing.assert_array_equal(result.memory.slots, emb.data)
        assert result.epoch_losses == []

    def test_separated_points_move_apart(self):
        emb = EmbeddingSet.from_array(np.array([[1.0, 0.0], [0.0, 1.0]]))
        before = np.sum((emb.data[0] - emb.data[1]) ** 2)
        result = recognition_stage(emb, 5, beta=1.0, rate=0.1, quiet=True)
        after = np.sum((result.embeddings.data[0] - result.embeddings.data[1]) ** 2)
        assert after >= before

    def test_loss_trends_down(self):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            emb = EmbeddingSet.from_array(rng.normal(size=(40, 6)))
            losses = recognition_stage(emb, 10, beta=0.5, rate=0.05, quiet=True).epoch_losses
            assert len(losses) == 10
            assert np.mean(losses[-5:]) <= np.mean(losses[:5])

    def test_deterministic(self, rng):
        emb = EmbeddingSet.from_array(rng.normal(size=(25, 5)))
        a = recognition_stage(emb, 3, beta=0.1, rate=0.01, quiet=True)
        b = recognition_stage(emb, 3, beta=0.1, rate=0.01, quiet=True)
        assert np.array_equal(a.embeddings.data, b.embeddings.data)
        assert np.array_equal(a.memory.slots, b.memory.slots)
        assert a.epoch_losses == b.epoch_losses

    def test_outputs_stay_on_sphere(self, rng):
        emb = EmbeddingSet.from_array(rng.normal(size=(20, 4)))
        result = recognition_stage(emb, 2, beta=0.1, rate=0.05, quiet=True)
        np.testing.assert_allclose(np.linalg.norm(result.embeddings.data, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(result.memory.slots, axis=1), 1.0, atol=1e-6)


class TestClassMemoryAndRefine:
    def test_class_memory_is_renormalized_centroid(self):
        emb = EmbeddingSet.from_array(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
        state = ClusterState(np.array([0, 0, 1]), (None,) * 3)
        mem = build_class_memory(emb, state, beta=0.1)
        assert mem.num_slots == 2
        np.testing.assert_allclose(mem.slots[0], [math.sqrt(2) / 2, math.sqrt(2) / 2])
        np.testing.assert_allclose(mem.slots[1], [-1.0, 0.0])

    def test_zero_rate_is_identity(self, rng):
        emb = EmbeddingSet.from_array(rng.normal(size=(6, 3)))
        state = ClusterState(np.array([0, 0, 1, 1, 2, 2]), (None,) * 6)
        mem = build_class_memory(emb, state, beta=0.1)
        assert refine_features(emb, state, mem, 0.0) is emb

    def test_shared_label_pulls_together(self):
        h = math.sqrt(0.5)
        emb = EmbeddingSet.from_array(np.array([[1.0, 0.0], [0.0, 1.0], [-h, -h]]))
        state = ClusterState(np.array([0, 0, 1]), (None,) * 3)
        mem = build_class_memory(emb, state, beta=1.0)
        out = refine_features(emb, state, mem, 0.5)
        before = np.sum((emb.data[0] - emb.data[1]) ** 2)
        after = np.sum((out.data[0] - out.data[1]) ** 2)
        assert after < before
        assert out.data[2] @ emb.data[2] == pytest.approx(1.0)

    def test_rows_stay_unit_norm(self, rng):
        emb = EmbeddingSet.from_array(rng.normal(size=(30, 6)))
        state = ClusterState(rng.integers(0, 4, size=30), (None,) * 30).compact()
        mem = build_class_memory(emb, state, beta=0.1)
        out = refine_features(emb, state, mem, 0.7)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-6)

    def test_refine_rejects_noise(self, rng):
        emb = EmbeddingSet.from_array(rng.normal(size=(3, 2)))
        mem = FeatureMemory(np.eye(2), beta=0.1)
        with pytest.raises(ValueError):
            refine_features(emb, ClusterState(np.array([0, -1, 1]), (None,) * 3), mem, 0.5)
