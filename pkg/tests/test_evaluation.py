import json
import math

import pytest

from cmdlm.evaluation import (
    ScoredPrediction,
    estimate_commercial_recall,
    evaluate,
    f1,
    precision_at_threshold,
    precision_at_top,
    threshold_for_flagged_recall,
)


def pred(rid, score, flagged=False, truth="benign"):
    return ScoredPrediction(record_id=rid, score=score, inbox_flag=flagged, truth=truth)


class TestPrecisionAtTop:
    def test_all_hits(self):
        preds = [pred(f"r{i}", 1.0 - i * 0.1, truth="oob") for i in range(3)]
        assert precision_at_top(preds, 3) == (1.0, 3)

    def test_all_misses(self):
        preds = [pred(f"r{i}", 1.0 - i * 0.1, truth="benign") for i in range(3)]
        assert precision_at_top(preds, 3) == (0.0, 3)

    def test_flagged_excluded_from_ranking(self):
        preds = [
            pred("a", 0.99, flagged=True, truth="inbox"),
            pred("b", 0.8, truth="oob"),
            pred("c", 0.5, truth="benign"),
        ]
        assert precision_at_top(preds, 1) == (1.0, 1)

    def test_fewer_available_than_v(self):
        preds = [pred("a", 0.9, truth="oob"), pred("b", 0.1, truth="benign")]
        precision, used = precision_at_top(preds, 10)
        assert used == 2
        assert precision == 0.5

    def test_ties_keep_input_order(self):
        preds = [pred("a", 0.5, truth="benign"), pred("b", 0.5, truth="oob")]
        assert precision_at_top(preds, 1) == (0.0, 1)

    def test_missing_truth_rejected(self):
        with pytest.raises(ValueError):
            precision_at_top([ScoredPrediction("a", 1.0, False, None)], 1)


class TestThreshold:
    def scores(self):
        return [
            pred("a", 0.9, flagged=True, truth="inbox"),
            pred("b", 0.7, flagged=True, truth="inbox"),
            pred("c", 0.95, flagged=True, truth="inbox"),
            pred("d", 0.3, truth="benign"),
        ]

    def test_full_recall_takes_minimum(self):
        assert threshold_for_flagged_recall(self.scores(), 1.0) == pytest.approx(0.7)

    def test_two_thirds_recall(self):
        assert threshold_for_flagged_recall(self.scores(), 2 / 3) == pytest.approx(0.9)

    def test_tiny_target_takes_maximum(self):
        assert threshold_for_flagged_recall(self.scores(), 1e-9) == pytest.approx(0.95)

    def test_no_flagged_errors(self):
        with pytest.raises(ValueError):
            threshold_for_flagged_recall([pred("a", 0.5)], 1.0)

    def test_recall_constraint_holds(self):
        preds = self.scores()
        for u in (0.3, 0.5, 0.9, 1.0):
            theta = threshold_for_flagged_recall(preds, u)
            flagged = [p.score for p in preds if p.inbox_flag]
            recall = sum(1 for s in flagged if s >= theta) / len(flagged)
            assert recall >= u
            # and it is the largest such threshold (any higher loses a sample)
            above = [s for s in flagged if s > theta]
            if above:
                tighter = sum(1 for s in flagged if s >= min(above)) / len(flagged)
                assert tighter < u


class TestPrecisionAtThreshold:
    def fixture(self):
        return [
            pred("a", 0.99, flagged=True, truth="inbox"),
            pred("b", 0.95, truth="oob"),
            pred("c", 0.90, truth="oob"),
            pred("d", 0.80, truth="benign"),
            pred("e", 0.10, truth="benign"),
            pred("f", 0.05, truth="oob"),
        ]

    def test_hand_computed_fractions(self):
        oob, overall = precision_at_threshold(self.fixture(), 0.8)
        assert overall == pytest.approx(3 / 4)
        assert oob == pytest.approx(2 / 3)

    def test_all_malicious_gives_one(self):
        preds = [pred("a", 0.9, flagged=True, truth="inbox"), pred("b", 0.85, truth="oob")]
        oob, overall = precision_at_threshold(preds, 0.5)
        assert overall == 1.0 and oob == 1.0

    def test_empty_positive_set_errors(self):
        with pytest.raises(ValueError):
            precision_at_threshold(self.fixture(), 2.0)


class TestF1:
    def test_reference_value(self):
        assert f1(0.994, 1.0) == pytest.approx(0.997, abs=5e-4)

    def test_perfect(self):
        assert f1(1.0, 1.0) == 1.0

    def test_harmonic_mean_of_equals(self):
        assert f1(0.5, 0.5) == pytest.approx(0.5)

    def test_symmetry_and_identity(self):
        assert f1(0.3, 0.9) == pytest.approx(f1(0.9, 0.3))
        for a in (0.1, 0.42, 1.0):
            assert f1(a, a) == pytest.approx(a)

    def test_double_zero_defined(self):
        assert f1(0.0, 0.0) == 0.0

    def test_range_validation(self):
        with pytest.raises(ValueError):
            f1(1.2, 0.5)


class TestCommercialRecall:
    def test_zero_target(self):
        assert estimate_commercial_recall(0.0, 100, 0.5, 300) == 0.0

    def test_hand_fixture(self):
        assert estimate_commercial_recall(1.0, 100, 0.5, 300) == pytest.approx(0.5)

    def test_full_oob_precision_reduces_to_ratio(self):
        assert estimate_commercial_recall(1.0, 50, 1.0, 200) == pytest.approx(50 / 200)

    def test_zero_denominator(self):
        with pytest.raises(ZeroDivisionError):
            estimate_commercial_recall(0.0, 0, 0.0, 100)

    def test_bounded_by_one_on_consistent_fixtures(self):
        # u*S flagged positives can never exceed the positive set they live in
        for (u, s, x, t) in [(1.0, 50, 0.6, 300), (0.9, 120, 0.3, 500), (1.0, 10, 0.0, 10)]:
            assert estimate_commercial_recall(u, s, x, t) <= 1.0 + 1e-12


class TestEvaluate:
    def fixture(self):
        return [
            pred("a", 0.99, flagged=True, truth="inbox"),
            pred("b", 0.95, truth="oob"),
            pred("c", 0.90, truth="oob"),
            pred("d", 0.80, truth="benign"),
            pred("e", 0.10, truth="benign"),
            pred("f", 0.70, flagged=True, truth="inbox"),
        ]

    def test_report_matches_hand_computation(self):
        report = evaluate(self.fixture(), v_list=[2, 4], recall_target=1.0)
        assert report.threshold == pytest.approx(0.70)
        assert report.inbox_recall_achieved == 1.0
        # positives at 0.70: a, b, c, d, f -> 4/5 malicious
        assert report.overall_precision == pytest.approx(4 / 5)
        # unflagged positives: b, c, d -> 2/3 oob
        assert report.oob_precision == pytest.approx(2 / 3)
        assert report.precision_at[2] == pytest.approx(1.0)
        assert report.precision_at[4] == pytest.approx(0.5)
        assert report.n_predicted_positive == 5
        assert report.f1_model == pytest.approx(f1(4 / 5, 1.0))

    def test_permutation_invariance(self):
        base = evaluate(self.fixture(), v_list=[3], recall_target=1.0)
        shuffled = evaluate(list(reversed(self.fixture())), v_list=[3], recall_target=1.0)
        assert base.to_json() == shuffled.to_json()

    def test_full_recall_guaranteed_at_u_one(self):
        report = evaluate(self.fixture(), recall_target=1.0)
        assert report.inbox_recall_achieved == 1.0

    def test_top_prefix_counts_monotone(self):
        preds = self.fixture()
        hits = []
        for v in (1, 2, 3, 4):
            precision, used = precision_at_top(preds, v)
            hits.append(round(precision * used))
        assert all(b >= a for a, b in zip(hits, hits[1:]))

    def test_multi_line_mode_skips_threshold_metrics(self):
        report = evaluate(self.fixture(), v_list=[2], multi_line=True)
        assert report.threshold is None
        assert report.oob_precision is None
        assert "multi-line" in report.format_table()

    def test_json_round_trip(self):
        report = evaluate(self.fixture(), v_list=[2])
        payload = json.loads(report.to_json())
        assert payload["n_predictions"] == 6
        assert payload["precision_at"]["2"] == report.precision_at[2]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evaluate([])

    def test_non_finite_score_rejected(self):
        with pytest.raises(ValueError):
            ScoredPrediction("a", math.inf, False, "benign")
