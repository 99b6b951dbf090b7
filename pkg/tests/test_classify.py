import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marlframes.classify import (
    Prediction, average_precision, mean_average_precision, pooled_prediction,
    predict_from_positions, top1, write_predictions_csv,
)
from marlframes.envdata import FrameSequence
from marlframes.sampler import ModelDims, ModelParameters

DIMS = ModelDims(D=4, d_o=6, H=8, C=3, M=1)


def pred(i, scores):
    scores = np.asarray(scores, dtype=float)
    return Prediction(f"v{i:03d}", scores, int(np.argmax(scores)), np.array([0]))


def brute_force_ap(scores, relevant, ids):
    """Precision at every positive's rank, averaged; written independently of the library."""
    ranked = sorted(zip(scores, ids, relevant), key=lambda x: (-x[0], x[1]))
    precisions = []
    for k in range(1, len(ranked) + 1):
        if ranked[k - 1][2]:
            precisions.append(sum(r for _, _, r in ranked[:k]) / k)
    return float(np.mean(precisions))


class TestPrediction:
    params = ModelParameters.init(DIMS, 0)
    seq = FrameSequence("p", 1, np.random.default_rng(0).uniform(-1, 1, (10, 4)))

    def test_identical_positions_equal_single_frame(self):
        a = predict_from_positions(self.params, self.seq, [4, 4, 4])
        b = predict_from_positions(self.params, self.seq, [4])
        np.testing.assert_allclose(a.scores, b.scores, rtol=0, atol=1e-15)

    @given(st.permutations([0, 3, 5, 7, 9]))
    def test_permutation_invariant(self, perm):
        a = predict_from_positions(self.params, self.seq, [0, 3, 5, 7, 9])
        b = predict_from_positions(self.params, self.seq, perm)
        np.testing.assert_allclose(a.scores, b.scores, rtol=0, atol=1e-15)
        assert a.predicted == b.predicted

    def test_uniform_logits(self):
        p = pooled_prediction("u", np.zeros((3, 4)), [0, 1, 2])
        np.testing.assert_allclose(p.scores, 0.25, rtol=0, atol=1e-15)
        assert p.predicted == 0  # lowest class wins ties

    def test_scores_normalised(self):
        p = predict_from_positions(self.params, self.seq, [1, 2])
        assert abs(p.scores.sum() - 1) <= 1e-9
        assert p.predicted == int(np.argmax(p.scores))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            predict_from_positions(self.params, self.seq, [10])


class TestTop1:
    def test_examples(self):
        preds = [pred(i, s) for i, s in enumerate([[1, 0], [0, 1], [1, 0], [0, 1]])]
        assert top1(preds, [0, 1, 0, 1]) == 1.0
        assert top1(preds, [1, 0, 1, 0]) == 0.0
        assert top1(preds, [0, 1, 0, 0]) == 0.75

    def test_empty(self):
        with pytest.raises(ValueError):
            top1([], [])


class TestMAP:
    def test_perfect(self):
        preds = [pred(i, s) for i, s in enumerate([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]])]
        assert mean_average_precision(preds, [0, 1, 0]).mAP == 1.0

    def test_positive_at_rank_two(self):
        ap = average_precision(np.array([0.9, 0.5, 0.1]), np.array([False, True, False]), ["a", "b", "c"])
        assert ap == 0.5

    def test_ties_broken_by_id(self):
        ap = average_precision(np.array([0.5, 0.5]), np.array([False, True]), ["b", "a"])
        assert ap == 1.0

    def test_missing_class_excluded(self):
        preds = [pred(i, s) for i, s in enumerate([[0.6, 0.3, 0.1], [0.2, 0.7, 0.1]])]
        rep = mean_average_precision(preds, [0, 1])
        assert np.isnan(rep.per_class_ap[2])
        assert rep.mAP == pytest.approx(np.nanmean(rep.per_class_ap))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        labels = np.repeat([0, 1], 10)
        rng.shuffle(labels)
        scores = rng.dirichlet([1, 1], size=20)
        preds = [pred(i, s) for i, s in enumerate(scores)]
        rep = mean_average_precision(preds, labels)
        ids = [p.id for p in preds]
        expect = [brute_force_ap(scores[:, c], labels == c, ids) for c in range(2)]
        np.testing.assert_allclose(rep.per_class_ap, expect, rtol=0, atol=1e-12)
        assert rep.mAP == pytest.approx(np.mean(expect), abs=1e-12)
        assert 0 <= rep.mAP <= 1 and 0 <= rep.top1 <= 1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, 15)
        scores = rng.random((15, 3))
        base = mean_average_precision([pred(i, s) for i, s in enumerate(scores)], labels)
        warped = np.exp(3 * scores) + 2.0
        other = mean_average_precision([pred(i, s) for i, s in enumerate(warped)], labels)
        np.testing.assert_array_equal(np.nan_to_num(base.per_class_ap, nan=-1),
                                      np.nan_to_num(other.per_class_ap, nan=-1))


def test_predictions_csv(tmp_path):
    preds = [pred(0, [0.25, 0.75]), pred(1, [0.5, 0.5])]
    path = tmp_path / "p.csv"
    write_predictions_csv(path, preds, [1, 0])
    lines = path.read_text().splitlines()
    assert lines[0] == "id,label,predicted,score_0,score_1"
    assert lines[1] == "v000,1,1,0.25,0.75"
