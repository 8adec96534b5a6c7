import json

import numpy as np
import pytest

from protomix import (
    ValidationError,
    balanced_accuracy,
    cohen_kappa_quadratic,
    concordance_index,
    evaluate_classification,
    evaluate_survival,
    weighted_f1,
)


def cindex_enumerator(risks, times, events):
    """Independent pair-by-pair concordance computation."""
    num, den = 0.0, 0
    n = len(risks)
    for i in range(n):
        for j in range(n):
            if times[i] < times[j] and events[i]:
                den += 1
                if risks[i] > risks[j]:
                    num += 1.0
                elif risks[i] == risks[j]:
                    num += 0.5
    return num / den, den


class TestBalancedAccuracy:
    def test_perfect(self):
        labels = [0, 1, 2, 0, 1, 2]
        assert balanced_accuracy(labels, labels, 3) == 1.0

    def test_one_class_collapsed(self):
        labels = [0, 0, 1, 1]
        preds = [0, 0, 0, 0]
        assert balanced_accuracy(preds, labels, 2) == 0.5

    def test_three_class_fixture_matches_hand_confusion(self):
        labels = [0, 0, 0, 1, 1, 2, 2, 2, 2]
        preds_ = [0, 1, 0, 1, 2, 2, 2, 0, 2]
        # hand confusion: class0 recall 2/3, class1 recall 1/2, class2 recall 3/4
        expected = (2 / 3 + 1 / 2 + 3 / 4) / 3
        assert balanced_accuracy(preds_, labels, 3) == pytest.approx(expected, abs=1e-12)

    def test_only_present_classes_count(self):
        labels = [0, 0, 2, 2]
        preds_ = [0, 0, 2, 0]
        assert balanced_accuracy(preds_, labels, 4) == pytest.approx((1.0 + 0.5) / 2)

    def test_relabeling_invariance(self, rng):
        labels = rng.integers(0, 3, 40)
        preds_ = rng.integers(0, 3, 40)
        relabel = np.array([2, 0, 1])
        assert balanced_accuracy(preds_, labels, 3) == pytest.approx(
            balanced_accuracy(relabel[preds_], relabel[labels], 3), abs=1e-12
        )

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            balanced_accuracy([], [], 2)


class TestWeightedF1:
    def test_perfect(self):
        labels = [0, 1, 0, 1]
        assert weighted_f1(labels, labels, 2) == 1.0

    def test_single_class_predictions(self):
        labels = [0, 0, 1, 1]
        preds_ = [0, 0, 0, 0]
        # class0: P=0.5, R=1, F1=2/3; class1: F1=0 -> weighted 1/3
        assert weighted_f1(preds_, labels, 2) == pytest.approx(1 / 3, abs=1e-12)

    def test_matches_per_class_oracle(self, rng):
        labels = rng.integers(0, 4, 60)
        preds_ = rng.integers(0, 4, 60)
        total = 0.0
        for c in range(4):
            tp = int(np.sum((preds_ == c) & (labels == c)))
            fp = int(np.sum((preds_ == c) & (labels != c)))
            fn = int(np.sum((preds_ != c) & (labels == c)))
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * p * r / (p + r) if p + r else 0.0
            total += (tp + fn) / 60 * f1
        assert weighted_f1(preds_, labels, 4) == pytest.approx(total, abs=1e-12)


class TestQuadraticKappa:
    def test_perfect(self):
        labels = [0, 1, 2, 3, 4, 5]
        assert cohen_kappa_quadratic(labels, labels, 6) == 1.0

    def test_independent_predictions_near_zero(self, rng):
        labels = rng.integers(0, 4, 4000)
        preds_ = labels[rng.permutation(4000)]
        assert abs(cohen_kappa_quadratic(preds_, labels, 4)) < 0.05

    def test_six_class_fixture_matches_direct_formula(self, rng):
        labels = rng.integers(0, 6, 50)
        preds_ = np.clip(labels + rng.integers(-1, 2, 50), 0, 5)
        k = 6
        observed = np.zeros((k, k))
        for t, p in zip(labels, preds_):
            observed[t, p] += 1
        w = np.array([[(i - j) ** 2 / (k - 1) ** 2 for j in range(k)] for i in range(k)])
        expected_m = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / observed.sum()
        expected = 1 - (w * observed).sum() / (w * expected_m).sum()
        assert cohen_kappa_quadratic(preds_, labels, 6) == pytest.approx(expected, abs=1e-12)

    def test_degenerate_case_is_zero(self):
        assert cohen_kappa_quadratic([1, 1, 1], [1, 1, 1], 3) == 0.0

    def test_negative_kappa_not_clamped(self):
        labels = [0, 0, 0, 1, 1, 1]
        preds_ = [1, 1, 1, 0, 0, 0]
        assert cohen_kappa_quadratic(preds_, labels, 2) < 0

    def test_kappa_one_iff_equal(self, rng):
        labels = rng.integers(0, 3, 30)
        preds_ = labels.copy()
        preds_[0] = (preds_[0] + 1) % 3
        assert cohen_kappa_quadratic(preds_, labels, 3) < 1.0


class TestConcordance:
    def test_perfectly_anti_ordered(self):
        times = np.array([1.0, 2.0, 3.0, 4.0])
        risks = np.array([4.0, 3.0, 2.0, 1.0])
        result = concordance_index(risks, times, np.ones(4, dtype=bool))
        assert result.cindex == 1.0
        assert result.n_comparable_pairs == 6

    def test_all_tied_risks(self):
        times = np.array([1.0, 2.0, 3.0])
        result = concordance_index(np.zeros(3), times, np.ones(3, dtype=bool))
        assert result.cindex == 0.5

    def test_matches_enumerator_with_censoring(self, rng):
        for _ in range(25):
            n = 12
            risks = rng.standard_normal(n)
            times = rng.uniform(0.5, 10.0, n)
            events = rng.integers(0, 2, n).astype(bool)
            events[int(rng.integers(n))] = True
            expected, pairs = cindex_enumerator(risks, times, events)
            result = concordance_index(risks, times, events)
            assert result.cindex == expected
            assert result.n_comparable_pairs == pairs

    def test_monotone_transform_invariance(self, rng):
        risks = rng.standard_normal(15)
        times = rng.uniform(0.1, 9.0, 15)
        events = rng.integers(0, 2, 15).astype(bool)
        events[0] = True
        base = concordance_index(risks, times, events).cindex
        assert concordance_index(np.exp(risks), times, events).cindex == base
        assert concordance_index(3.0 * risks + 11.0, times, events).cindex == base

    def test_censored_earlier_time_excluded(self):
        # earlier subject censored: the pair is not comparable
        risks = np.array([1.0, 0.0])
        times = np.array([1.0, 2.0])
        events = np.array([False, True])
        with pytest.raises(ValidationError, match="comparable"):
            concordance_index(risks, times, events)

    def test_permutation_invariance(self, rng):
        n = 20
        risks = rng.standard_normal(n)
        times = rng.uniform(0.1, 5.0, n)
        events = rng.integers(0, 2, n).astype(bool)
        events[:3] = True
        perm = rng.permutation(n)
        assert concordance_index(risks, times, events) == concordance_index(
            risks[perm], times[perm], events[perm]
        )


class TestEvalReport:
    def test_classification_report(self):
        labels = [0, 1, 1, 0]
        preds_ = [0, 1, 0, 0]
        report = evaluate_classification(preds_, labels, 2)
        assert report.metrics["balanced_accuracy"] == pytest.approx(0.75)
        assert report.per_class[0]["support"] == 2
        assert report.flags["kappa_degenerate"] is False
        parsed = json.loads(report.to_json())
        assert parsed["task"] == "classification"
        # stable key order
        assert report.to_json() == report.to_json()

    def test_survival_report(self, rng):
        times = rng.uniform(1, 10, 10)
        report = evaluate_survival(rng.standard_normal(10), times, np.ones(10, dtype=bool))
        assert 0.0 <= report.metrics["c_index"] <= 1.0
        assert report.n_comparable_pairs == 45
        header, row = report.to_csv_row()
        assert header == ["task", "c_index", "n_comparable_pairs"]
        assert len(row) == 3
