from __future__ import annotations

import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from evsgkit.errors import DataError, DuplicateIdError, EmptySetError, PredictionFileError
from evsgkit.metrics import (
    AnswerMatcher,
    PredictionRecord,
    compute_metrics,
    load_predictions,
    parse_predictions,
    write_report,
)

from .conftest import FIXTURES
from .oracles import naive_metrics

KEYS = ("mIoU", "R1_at_03", "R1_at_05", "accuracy", "acc_at_iou05")


def test_four_record_fixture():
    report = compute_metrics(load_predictions(FIXTURES / "predictions.jsonl"))
    assert report.n_samples == 4
    assert report.to_dict() == {
        "n_samples": 4, "mIoU": 0.5, "R1_at_03": 0.75, "R1_at_05": 0.5, "accuracy": 0.75, "acc_at_iou05": 0.5,
    }


def test_fixture_per_record_decisions():
    records = load_predictions(FIXTURES / "predictions.jsonl")
    assert [round(r.iou, 12) for r in records] == [1.0, 0.6, 0.4, 0.0]
    assert [r.answer_correct for r in records] == [True, True, False, True]


@pytest.mark.parametrize("pred, gt, expected", [
    ("B", "B", True),
    ("(b) the dog", "B", True),
    ("b.", "(B)", True),
    ("Because", "B", False),
    ("C", "B", False),
    ("A red cup.", "a red cup", True),
    ("a blue cup", "a red cup", False),
    (None, "a", False),
])
def test_answer_matcher(pred, gt, expected):
    assert AnswerMatcher()(pred, gt) is expected


def test_answer_matcher_threshold():
    assert AnswerMatcher(0.5)("a blue cup", "a red cup")
    with pytest.raises(DataError):
        AnswerMatcher(0.0)


def test_equal_to_threshold_counts():
    records = [PredictionRecord("a", (0.0, 3.0), "x", (0.0, 10.0), "x", True),
               PredictionRecord("b", (0.0, 5.0), "x", (0.0, 10.0), "x", True)]
    report = compute_metrics(records)
    assert (report.R1_at_03, report.R1_at_05, report.acc_at_iou05) == (1.0, 0.5, 0.5)


def test_malformed_pred_span_scores_zero():
    rec = PredictionRecord.from_dict({"id": 1, "pred_span": [5, 2], "pred_answer": "x",
                                      "gt_span": [0, 10], "gt_answer": "x"})
    assert rec.pred_span is None and rec.iou == 0.0 and rec.id == "1"


def test_duplicate_id():
    lines = [json.dumps({"id": "a", "gt_span": [0, 1], "gt_answer": "x"})] * 2
    with pytest.raises(DuplicateIdError) as info:
        parse_predictions(lines)
    assert info.value.line == 2


@pytest.mark.parametrize("line", [
    "{not json",
    json.dumps({"id": "a", "gt_answer": "x"}),
    json.dumps({"id": "a", "gt_span": [3, 1], "gt_answer": "x"}),
    json.dumps({"id": "a", "gt_span": [0, 1], "gt_answer": "x", "answer_correct": "yes"}),
    json.dumps([1, 2]),
])
def test_malformed_lines_name_the_line(line):
    good = json.dumps({"id": "ok", "gt_span": [0, 1], "gt_answer": "x"})
    with pytest.raises(PredictionFileError) as info:
        parse_predictions([good, "", line])
    assert info.value.line == 3


def test_empty_set():
    with pytest.raises(EmptySetError):
        compute_metrics([])
    with pytest.raises(PredictionFileError):
        load_predictions(FIXTURES / "nope.jsonl")


def test_write_report(tmp_path):
    report = compute_metrics(load_predictions(FIXTURES / "predictions.jsonl"))
    text, summary = write_report(report, tmp_path / "out")
    assert json.loads(summary.read_text()) == report.to_dict()
    assert "mIoU" in text.read_text() and "50.00" in text.read_text()


def _random_rows(rng: random.Random):
    rows = []
    for _ in range(rng.randint(1, 40)):
        # Tenths of a second so the exact-fraction oracle sees the same values.
        gs = rng.randint(0, 100)
        gt = (gs / 10, (gs + rng.randint(1, 80)) / 10)
        if rng.random() < 0.15:
            pred = None
        else:
            ps = rng.randint(0, 120)
            pred = (ps / 10, (ps + rng.randint(1, 80)) / 10)
        rows.append((pred, gt, rng.random() < 0.5))
    return rows


def test_brute_force_equivalence_on_random_sets():
    rng = random.Random(17)
    for _ in range(100):
        rows = _random_rows(rng)
        records = [PredictionRecord(str(k), p, "", g, "", c) for k, (p, g, c) in enumerate(rows)]
        report = compute_metrics(records).to_dict()
        oracle = naive_metrics(rows)
        for key in KEYS:
            assert report[key] == pytest.approx(float(oracle[key]), abs=1e-12), key


@given(st.randoms(use_true_random=False))
def test_metric_ranges_and_ordering(rnd):
    rows = _random_rows(rnd)
    r = compute_metrics([PredictionRecord(str(k), p, "", g, "", c) for k, (p, g, c) in enumerate(rows)])
    assert 0 <= r.R1_at_05 <= r.R1_at_03 <= 1
    assert r.acc_at_iou05 <= min(r.accuracy, r.R1_at_05)
    assert 0 <= r.mIoU <= 1
