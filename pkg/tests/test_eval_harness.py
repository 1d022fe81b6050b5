from __future__ import annotations

import random
import warnings
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import balanced_accuracy_from_confusion, pass_at_k_enum
from pathagent.dataset_io import VqaRecord
from pathagent.errors import (
    DuplicatePrediction,
    EmptyClass,
    EmptyClassWarning,
    InvalidArgs,
    RaggedAttempts,
    UnknownRecordId,
)
from pathagent.eval_harness import (
    VqaPrediction,
    aggregate_pass_at_k,
    balanced_accuracy,
    confusion_matrix,
    load_predictions,
    pass_at_k,
    pass_at_k_exact,
    render_table,
    report_from_json,
    score_vqa,
    write_predictions,
)


def rec(rid, ans=0, subset="BRCA"):
    return VqaRecord(rid, "q?", ("a", "b", "c", "d"), ans, subset)


class TestPassAtK:
    def test_spot_value(self):
        assert pass_at_k_exact(8, 4, 2) == Fraction(11, 14)
        assert f"{pass_at_k(8, 4, 2):.6f}" == "0.785714"

    def test_edges(self):
        assert pass_at_k_exact(8, 0, 3) == 0
        assert pass_at_k_exact(8, 8, 1) == 1
        assert pass_at_k_exact(5, 3, 3) == 1  # fewer than k incorrect attempts
        assert pass_at_k_exact(4, 1, 1) == Fraction(1, 4)

    @pytest.mark.parametrize("n,c,k", [(3, 4, 1), (3, 1, 0), (3, 1, 4), (-1, 0, 1)])
    def test_invalid(self, n, c, k):
        with pytest.raises(InvalidArgs):
            pass_at_k_exact(n, c, k)

    def test_non_integer(self):
        with pytest.raises(InvalidArgs):
            pass_at_k_exact(8, 4.0, 2)

    def test_small_enumeration(self):
        for n in range(1, 6):
            for c in range(n + 1):
                for k in range(1, n + 1):
                    assert pass_at_k_exact(n, c, k) == pass_at_k_enum(n, c, k)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 60).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n), st.integers(1, n))))
    def test_monotone_in_k_and_c(self, nck):
        n, c, k = nck
        p = pass_at_k_exact(n, c, k)
        assert 0 <= p <= 1
        if k < n:
            assert pass_at_k_exact(n, c, k + 1) >= p
        if c < n:
            assert pass_at_k_exact(n, c + 1, k) >= p


class TestAggregate:
    def test_average_over_records(self):
        gold = [rec("a", 0), rec("b", 1)]
        attempts = [VqaPrediction("a", i, 0 if i < 2 else 1) for i in range(4)]
        attempts += [VqaPrediction("b", i, 0) for i in range(4)]
        out = aggregate_pass_at_k(attempts, gold, [1, 2])
        assert out[1] == pytest.approx(0.25)
        assert out[2] == pytest.approx(float(pass_at_k_exact(4, 2, 2)) / 2)

    def test_errors_count_as_wrong(self):
        gold = [rec("a", 0)]
        attempts = [VqaPrediction("a", 0, error="timeout"), VqaPrediction("a", 1, 0)]
        assert aggregate_pass_at_k(attempts, gold, [1])[1] == 0.5

    def test_ragged(self):
        gold = [rec("a"), rec("b")]
        with pytest.raises(RaggedAttempts):
            aggregate_pass_at_k([VqaPrediction("a", 0, 0), VqaPrediction("a", 1, 0), VqaPrediction("b", 0, 0)],
                                gold, [1])

    def test_duplicate_and_unknown(self):
        with pytest.raises(DuplicatePrediction):
            aggregate_pass_at_k([VqaPrediction("a", 0, 0)] * 2, [rec("a")], [1])
        with pytest.raises(UnknownRecordId):
            aggregate_pass_at_k([VqaPrediction("zz", 0, 0)], [rec("a")], [1])

    def test_k_out_of_range(self):
        with pytest.raises(InvalidArgs):
            aggregate_pass_at_k([VqaPrediction("a", 0, 0)], [rec("a")], [2])


class TestScore:
    def test_per_subset_and_pooled(self):
        gold = [rec("1", 0, "BRCA"), rec("2", 1, "BRCA"), rec("3", 2, "LUAD")]
        preds = [VqaPrediction("1", 0, 0), VqaPrediction("2", 0, 3), VqaPrediction("3", 0, 2)]
        rep = score_vqa(preds, gold)
        assert (rep.per_subset["BRCA"].correct, rep.per_subset["BRCA"].n) == (1, 2)
        assert rep.overall == pytest.approx(2 / 3)
        assert list(rep.per_subset) == ["BRCA", "LUAD"]

    def test_missing_prediction_is_wrong(self):
        rep = score_vqa([VqaPrediction("1", 0, 0)], [rec("1", 0), rec("2", 0)])
        assert rep.correct == 1 and rep.n == 2

    def test_duplicate(self):
        with pytest.raises(DuplicatePrediction):
            score_vqa([VqaPrediction("1", 0, 0), VqaPrediction("1", 1, 0)], [rec("1")])

    def test_unknown(self):
        with pytest.raises(UnknownRecordId):
            score_vqa([VqaPrediction("x", 0, 0)], [rec("1")])

    def test_table_and_json(self):
        gold = [rec(str(i), 0, s) for i, s in enumerate(["BRCA", "BRCA", "TGCT"])]
        rep = score_vqa([VqaPrediction("0", 0, 0), VqaPrediction("1", 0, 1), VqaPrediction("2", 0, 0)], gold)
        table = render_table(rep, ["BRCA", "LUAD", "TGCT"], title="Agent")
        lines = table.splitlines()
        assert "BRCA" in lines[0] and "Overall" in lines[0]
        assert "(2)" in lines[1] and "(0)" in lines[1] and "(3)" in lines[1]
        assert "50.0" in lines[3] and "66.7" in lines[3] and "-" in lines[3]
        assert report_from_json(rep.to_json()).to_json() == rep.to_json()

    def test_predictions_io(self, tmp_path):
        preds = [VqaPrediction("a", 0, 1), VqaPrediction("a", 1, error="boom")]
        write_predictions(tmp_path / "p.jsonl", preds)
        assert load_predictions(tmp_path / "p.jsonl") == preds

    def test_prediction_validation(self):
        with pytest.raises(ValueError):
            VqaPrediction("a", 0)
        with pytest.raises(ValueError):
            VqaPrediction("a", 0, 1, "err")


class TestBalancedAccuracy:
    def test_simple(self):
        gold = ["a", "a", "a", "b"]
        preds = ["a", "a", "b", "b"]
        assert balanced_accuracy(preds, gold, ["a", "b"]) == pytest.approx((2 / 3 + 1) / 2)

    def test_empty_class_warns(self):
        with pytest.warns(EmptyClassWarning):
            v = balanced_accuracy(["a", "b"], ["a", "a"], ["a", "b", "c"])
        assert v == 0.5

    def test_no_gold(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(EmptyClass):
                balanced_accuracy([], [], ["a"])

    def test_undeclared_gold(self):
        with pytest.raises(InvalidArgs):
            balanced_accuracy(["a"], ["z"], ["a"])

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgs):
            balanced_accuracy(["a"], ["a", "a"], ["a"])

    def test_matches_confusion_oracle(self):
        rng = random.Random(3)
        labels = ["x", "y", "z"]
        gold = [rng.choice(labels) for _ in range(60)]
        preds = [rng.choice(labels + ["other"]) for _ in range(60)]
        cm = confusion_matrix(preds, gold, labels)
        # predictions outside the label set are misses, so add them back to row totals
        for i, lab in enumerate(labels):
            cm[i].append(sum(1 for p, g in zip(preds, gold) if g == lab and p not in labels))
        assert balanced_accuracy(preds, gold, labels) == pytest.approx(balanced_accuracy_from_confusion(cm),
                                                                       abs=1e-12)
