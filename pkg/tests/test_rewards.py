from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from evsgkit.errors import ConfigError, DataError, SpanError
from evsgkit.rewards import (
    NEUTRAL_DUMP,
    AttentionDump,
    GroundTruth,
    ModelOutput,
    RewardWeights,
    composite,
    gated_attn,
    parse_response,
    r_acc,
    r_attn,
    r_form,
    score_text,
    sim,
    t_iou,
    token_f1,
)

from .oracles import grid_tiou

W = RewardWeights()
WELL_FORMED = "<think>t</think><answer>x</answer>"


def output(answer="the red cup", span=(12.0, 20.0), raw=WELL_FORMED):
    return ModelOutput(raw, None, span, answer)


# --- t_iou ------------------------------------------------------------------------


@pytest.mark.parametrize("pred, gt, expected", [
    ((0, 10), (0, 10), 1.0),
    ((0, 5), (5, 10), 0.0),
    ((0, 6), (3, 9), 1 / 3),
    (None, (0, 10), 0.0),
    ((4, 4), (0, 10), 0.0),
    ((6, 2), (0, 10), 0.0),
])
def test_t_iou_examples(pred, gt, expected):
    assert t_iou(pred, gt) == pytest.approx(expected, abs=1e-12)


def test_t_iou_matches_grid_oracle_on_example():
    assert abs(t_iou((0, 6), (3, 9)) - grid_tiou((0, 6), (3, 9))) < 1e-3


spans = st.tuples(st.floats(0, 100, allow_nan=False), st.floats(0.01, 50, allow_nan=False)).map(
    lambda p: (p[0], p[0] + p[1]))


@given(spans, spans)
def test_t_iou_symmetric_bounded_and_reflexive(a, b):
    assert t_iou(a, b) == t_iou(b, a)
    assert 0.0 <= t_iou(a, b) <= 1.0
    assert t_iou(a, a) == 1.0


# --- similarity ----------------------------------------------------------------------


def test_similarity_examples():
    assert token_f1("the man sits", "the man sits") == 1.0
    assert token_f1("a dog", "the cat") == 0.0
    assert token_f1("the man sits", "the man stands") == pytest.approx(2 / 3, abs=1e-6)
    assert sim(None, "anything") == 0.0


def test_custom_scorer_is_clipped():
    assert sim("a", "b", scorer=lambda p, g: 1.7) == 1.0
    assert sim("a", "b", scorer=lambda p, g: -0.2) == 0.0


# --- accuracy and format -------------------------------------------------------------


def test_r_acc_examples():
    gt = GroundTruth((12.0, 20.0), "the red cup")
    assert r_acc(output(), gt) == pytest.approx(1.0)
    assert r_acc(output(span=(30.0, 40.0)), gt) == pytest.approx(0.3)
    assert r_acc(output(answer="blue", span=(30.0, 40.0)), gt) == 0.0
    assert r_acc(output(span=(30.0, 40.0)), gt, RewardWeights(alpha=1.0)) == pytest.approx(1.0)


@pytest.mark.parametrize("text, expected", [
    ("<think>a</think><answer>b</answer>", 1),
    ("  <think>a\nb</think>\n<answer>b</answer>\n", 1),
    ("<answer>b</answer><think>a</think>", 0),
    ("<think>a</think>", 0),
    ("<think>a</think><answer>b</answer><answer>c</answer>", 0),
    ("<think><think>a</think></think><answer>b</answer>", 0),
    ("preamble <think>a</think><answer>b</answer>", 0),
])
def test_r_form(text, expected):
    assert r_form(text) == expected


# --- attention ----------------------------------------------------------------------------


def test_r_attn_sums():
    assert r_attn(AttentionDump(sum_vid=2.0, sum_graph=2.0)) == (0.5, None)
    assert r_attn(AttentionDump(sum_vid=2.0, sum_graph=0.0)) == (1.0, None)
    value, warning = r_attn(AttentionDump(sum_vid=0.0, sum_graph=0.0))
    assert value == 0.0 and "zero" in warning
    assert r_attn(None)[0] == 0.0


def test_r_attn_full_matrix():
    # Two response rows; video columns {0, 1} carry 0.6, graph columns {2, 3} carry 0.2.
    m = np.array([[0.1, 0.2, 0.05, 0.05], [0.2, 0.1, 0.05, 0.05]])
    dump = AttentionDump(matrix=m, t_vid=(0, 1), t_graph=(2, 3))
    assert dump.group_sums() == pytest.approx((0.6, 0.2))
    assert r_attn(dump)[0] == pytest.approx(0.75, abs=1e-12)


def test_r_attn_matrix_row_selection():
    m = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert r_attn(AttentionDump(matrix=m, t_res=(0,), t_vid=(0,), t_graph=(1,)))[0] == 1.0


def test_square_matrix_rejects_response_rows_inside_context_groups():
    with pytest.raises(DataError):
        AttentionDump(matrix=np.eye(3), t_res=(0,), t_vid=(0,), t_graph=(1,))


def test_attention_dump_validation():
    with pytest.raises(DataError):
        AttentionDump(sum_vid=1.0)
    with pytest.raises(DataError):
        AttentionDump(sum_vid=-1.0, sum_graph=1.0)
    with pytest.raises(DataError):
        AttentionDump(matrix=np.ones((2, 4)), t_vid=(0, 1), t_graph=(1, 2))
    with pytest.raises(DataError):
        AttentionDump(matrix=np.ones((2, 4)), t_vid=(0,), t_graph=(4,))
    with pytest.raises(DataError):
        AttentionDump.from_dict({"rows": 2, "cols": 2, "values": [1, 2, 3], "t_vid": [0], "t_graph": [1]})


def test_attention_dump_from_dict():
    d = AttentionDump.from_dict({"rows": 1, "cols": 3, "values": [3, 1, 0], "t_vid": [0], "t_graph": [1, 2]})
    assert r_attn(d)[0] == pytest.approx(0.75)
    assert AttentionDump.from_dict({"sum_vid": 1, "sum_graph": 3}).group_sums() == (1.0, 3.0)


@given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_attention_scale_invariance(scale, seed):
    m = np.random.default_rng(seed).random((3, 6))
    a = AttentionDump(matrix=m, t_vid=(0, 1, 2), t_graph=(3, 4))
    b = AttentionDump(matrix=m * scale, t_vid=(0, 1, 2), t_graph=(3, 4))
    assert r_attn(a)[0] == pytest.approx(r_attn(b)[0], abs=1e-12)


# --- gating -----------------------------------------------------------------------------


def test_gate_examples():
    assert gated_attn(0.9, 0.5, 0.2) == 0.0
    assert gated_attn(0.9, 0.4, 0.3) == 0.9
    assert gated_attn(0.7, 1.0, 1.0) == 0.7
    assert gated_attn(0.7, 0.39999, 1.0) == 0.0


# --- composite ------------------------------------------------------------------------------


def test_composite_perfect_output():
    b = composite(output(), GroundTruth((12.0, 20.0), "the red cup"), NEUTRAL_DUMP)
    assert b.r_acc == pytest.approx(1.0, abs=1e-12)
    assert b.total == pytest.approx(1.3, abs=1e-12)


def test_composite_all_zero():
    b = composite(ModelOutput("garbage"), GroundTruth((0.0, 1.0), "x"), None)
    assert b.total == 0.0
    assert b.notes


def test_composite_gate_fails():
    b = composite(output(span=(30.0, 40.0)), GroundTruth((12.0, 20.0), "the red cup"), NEUTRAL_DUMP)
    assert b.r_attn_raw == 0.5 and b.r_attn_gated == 0.0
    assert b.total == pytest.approx(0.51, abs=1e-12)


def test_weights_validation():
    with pytest.raises(ConfigError):
        RewardWeights(alpha=1.5)
    with pytest.raises(ConfigError):
        RewardWeights(lambda_attn=-0.1)
    assert W.max_total == pytest.approx(1.6)


def test_ground_truth_rejects_bad_span():
    with pytest.raises(SpanError):
        GroundTruth((5.0, 5.0), "x")


# --- parsing ----------------------------------------------------------------------------------


def test_parse_full_response():
    out = parse_response("<think>t</think><answer>from 3.0 to 9.5 seconds. Answer: C</answer>")
    assert (out.think_text, out.pred_span, out.pred_answer) == ("t", (3.0, 9.5), "C")


def test_parse_without_span():
    out = parse_response("<think>t</think><answer>Answer: C</answer>")
    assert out.pred_span is None and out.pred_answer == "C"


def test_parse_degenerate_span_warns():
    out = parse_response("<think>t</think><answer>from 9.5 to 3.0 seconds. Answer: C</answer>")
    assert out.pred_span is None
    assert "degenerate" in out.notes[0]


def test_score_text_end_to_end():
    raw = "<think>x</think><answer>from 12 to 20 seconds. Answer: The red cup.</answer>"
    assert score_text(raw, GroundTruth((12, 20), "the red cup"), NEUTRAL_DUMP).total == pytest.approx(1.3)


# --- properties ----------------------------------------------------------------------------------

unit = st.floats(0.0, 1.0, allow_nan=False)


def total_from(s, tiou, form, attn, w=W):
    gated = gated_attn(attn, s, tiou, w)
    return w.lambda_acc * (w.alpha * s + (1 - w.alpha) * tiou) + w.lambda_form * form + w.lambda_attn * gated


@given(spans, spans, st.text(max_size=30), st.text(max_size=30), st.floats(0, 10), st.floats(0, 10))
def test_components_in_range(pred, gt, answer, gt_answer, vid, graph):
    assume(gt_answer.strip())
    b = composite(ModelOutput(WELL_FORMED, None, pred, answer), GroundTruth(gt, gt_answer),
                  AttentionDump(sum_vid=vid, sum_graph=graph))
    for v in (b.r_sim, b.r_tiou, b.r_acc, b.r_form, b.r_attn_raw, b.r_attn_gated):
        assert 0.0 <= v <= 1.0
    assert 0.0 <= b.total <= W.max_total + 1e-12


@given(unit, unit, st.sampled_from([0, 1]), unit, unit)
def test_total_monotone_in_each_component(s, tiou, form, attn, bump):
    base = total_from(s, tiou, form, attn)
    assert total_from(min(1.0, s + bump), tiou, form, attn) >= base - 1e-12
    assert total_from(s, min(1.0, tiou + bump), form, attn) >= base - 1e-12
    assert total_from(s, tiou, 1, attn) >= base - 1e-12
    assert total_from(s, tiou, form, min(1.0, attn + bump)) >= base - 1e-12


@given(spans, spans, st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_failed_gate_ignores_attention(pred, gt, v1, g1, v2, g2):
    truth = GroundTruth(gt, "red cup")
    out = ModelOutput(WELL_FORMED, None, pred, "red cup")
    assume(t_iou(pred, gt) < W.gate_tiou)
    a = composite(out, truth, AttentionDump(sum_vid=v1, sum_graph=g1))
    b = composite(out, truth, AttentionDump(sum_vid=v2, sum_graph=g2))
    assert a.total == b.total


def test_t_iou_grid_oracle_sample():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        a, b = np.sort(rng.uniform(0, 20, 2)), np.sort(rng.uniform(0, 20, 2))
        if a[1] - a[0] < 1e-3 or b[1] - b[0] < 1e-3:
            continue
        worst = max(worst, abs(t_iou(a, b) - grid_tiou(tuple(a), tuple(b))))
    assert worst < 1e-3
    assert math.isfinite(worst)
