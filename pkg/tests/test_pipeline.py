from __future__ import annotations

import json

import numpy as np
import pytest

from evsgkit.errors import (
    CaptionParseError,
    ConfigError,
    ExtractionError,
    LexiconError,
    LimitViolationError,
    OverlapError,
    RefinementError,
)
from evsgkit.graph import TimeSpan, build_graph, serialize, validate
from evsgkit.mllm import ChatResponse, ScriptedMock
from evsgkit.pipeline import (
    CaptionSegment,
    ConstraintLexicon,
    GrainedCaptionSet,
    MultiGrainedCaptions,
    PipelineSettings,
    VideoRef,
    apply_constraints,
    cross_level_check,
    generate_captions,
    generate_initial_graph,
    load_lexicon,
    parse_caption_response,
    parse_graph_text,
    parse_lexicon,
    refine_graph,
    run_pipeline,
)

from .conftest import FIXTURES
from .oracles import random_graph

BENCH = VideoRef("file:///videos/bench_workout.mp4", 180.0)
KITCHEN = VideoRef("file:///videos/kitchen_tea.mp4", 60.0)
LIMIT_SETS = [(3, 5, 7), (5, 10, 15), (10, 15, 20)]


class Canned:
    """Client that answers every request with the same text."""

    def __init__(self, text: str):
        self.text = text
        self.requests = []

    def complete(self, request):
        self.requests.append(request)
        return ChatResponse(self.text)


@pytest.fixture(scope="module")
def mock():
    return ScriptedMock.from_dir(FIXTURES / "mock")


def caption_set(limit, duration, *spans_and_text):
    return GrainedCaptionSet(limit, duration, tuple(CaptionSegment(TimeSpan(s, e), t) for s, e, t in spans_and_text))


# --- captions ---------------------------------------------------------------------------


@pytest.mark.parametrize("limits", LIMIT_SETS)
def test_caption_counts_respect_limits(mock, limits):
    caps = generate_captions(mock, BENCH, PipelineSettings(limits=limits))
    for level, cap in zip(("coarse", "middle", "fine"), limits):
        assert 1 <= len(caps.level(level).segments) <= cap


def test_too_many_segments_is_limit_violation():
    text = "".join(f"[{k * 5}.0 - {k * 5 + 5}.0] step {k}\n" for k in range(12))
    with pytest.raises(LimitViolationError):
        parse_caption_response(text, 10, 60.0)


def test_small_overlap_is_repaired_at_midpoint():
    caps = parse_caption_response("[0 - 10.3] a\n[10.0 - 20] b\n", 5, 20.0)
    assert [s.span.as_tuple() for s in caps.segments] == [(0.0, 10.2), (10.2, 20.0)]


def test_large_overlap_is_error():
    with pytest.raises(OverlapError):
        parse_caption_response("[0 - 12] a\n[10 - 20] b\n", 5, 20.0)


def test_unparseable_response_keeps_raw_text():
    with pytest.raises(CaptionParseError) as info:
        parse_caption_response("I cannot watch videos.", 5, 20.0)
    assert "cannot watch" in info.value.raw_text


def test_segments_are_clamped_to_duration():
    caps = parse_caption_response("1. [0.0 - 8.0] a\n2. [8.0 - 25.0] b\n[30 - 40] gone\n", 5, 20.0)
    assert caps.segments[-1].span.end == 20.0
    assert len(caps.segments) == 2


def test_bench_fine_captions_repaired(mock):
    caps = generate_captions(mock, BENCH)
    assert caps.fine.segments[2].span.end == caps.fine.segments[3].span.start == 30.2


def test_captions_json_round_trip(mock):
    caps = generate_captions(mock, KITCHEN)
    assert MultiGrainedCaptions.from_json(caps.to_json()) == caps


def test_limits_must_increase():
    with pytest.raises(ConfigError):
        PipelineSettings(limits=(5, 5, 10))


def test_coverage_flags():
    full = [caption_set(limit, 10.0, (0, 10, "x")) for limit in (5, 10, 15)]
    short = caption_set(10, 10.0, (0, 5, "x"))
    caps = MultiGrainedCaptions("v", 10.0, full[0], short, full[2])
    assert caps.coverage_flags(0.95) == ["middle"]


# --- extraction ----------------------------------------------------------------------------


def test_single_caption_gives_single_event():
    middle = caption_set(5, 10.0, (0, 10, "A man holds a cup."))
    g = generate_initial_graph(Canned("Event 1 [0.0–10.0 s]:\n  (man, holds, cup)\n"), middle, "v")
    assert len(g.events) == 1 and g.edges == frozenset()


def test_missing_timestamps_name_the_event():
    middle = caption_set(5, 20.0, (0, 10, "a"), (10, 20, "b"))
    text = "Event 1 [0.0–10.0 s]:\n  (a, b, c)\nEvent 2:\n  (d, e, f)\n"
    with pytest.raises(ExtractionError) as info:
        generate_initial_graph(Canned(text), middle, "v")
    assert info.value.event == 2


def test_bad_triplet_lines_skipped_or_strict():
    text = "Event 1 [0–5 s]:\n  (a, b, c)\n  not a triplet\n"
    parsed = parse_graph_text(text)
    assert len(parsed.events[0].triplets) == 1 and len(parsed.warnings) == 1
    with pytest.raises(ExtractionError):
        parse_graph_text(text, strict=True)


def test_kitchen_initial_graph_matches_golden(mock):
    caps = generate_captions(mock, KITCHEN)
    g = generate_initial_graph(mock, caps.middle, caps.video_id)
    assert len(g.events) == 3
    assert serialize(g) == (FIXTURES / "golden" / "kitchen_tea.init.json").read_text(encoding="utf-8")


# --- consistency -------------------------------------------------------------------------


def test_identical_levels_have_no_flags():
    sets = [caption_set(limit, 10.0, (0, 10, "A man rides a bike.")) for limit in (5, 10, 15)]
    assert cross_level_check(MultiGrainedCaptions("v", 10.0, *sets)).flagged == []


def test_disjoint_vocabulary_is_flagged():
    outer = caption_set(5, 10.0, (0, 10, "A man rides a bike."))
    middle = caption_set(10, 10.0, (0, 10, "Purple elephants dance."))
    outer2 = caption_set(15, 10.0, (0, 10, "A man rides a bike."))
    assert cross_level_check(MultiGrainedCaptions("v", 10.0, outer, middle, outer2)).flagged == [1]


def test_hallucinated_segment_is_the_only_flag(mock):
    caps = generate_captions(mock, BENCH)
    assert cross_level_check(caps).flagged == [4]
    assert "cat" in caps.middle.segments[3].text


# --- constraints --------------------------------------------------------------------------

LEXICON = parse_lexicon("""
exclude sits_on stands_on
state lies_on
state sits_on
terminate lies_on picks_up
causal picks_up puts_down
""")


def three_events(*triplet_lists):
    return build_graph("v", 30, [(10 * k, 10 * k + 10, t) for k, t in enumerate(triplet_lists)])


def test_mutual_exclusion_drops_later_listed():
    g = three_events([("man", "sits_on", "bench"), ("man", "stands_on", "bench")], [], [])
    out, violations = apply_constraints(g, LEXICON)
    assert [t.relation for t in out.events[0].triplets] == ["sits_on"]
    dropped = [v for v in violations if v.kind == "mutual-exclusion"]
    assert len(dropped) == 1 and dropped[0].triplet.relation == "stands_on"


def test_causal_order_is_reported_not_fixed():
    g = three_events([("man", "puts_down", "cup")], [], [("man", "picks_up", "cup")])
    out, violations = apply_constraints(g, LEXICON)
    assert out == g
    assert [(v.kind, v.event) for v in violations] == [("causal-order", 3)]


def test_state_propagates_to_next_event():
    g = three_events([], [("towel", "lies_on", "ground")], [("man", "walks", "dog")])
    out, violations = apply_constraints(g, LEXICON)
    assert ("towel", "lies_on", "ground") in [t.as_tuple() for t in out.events[2].triplets]
    assert [(v.kind, v.event) for v in violations] == [("state-propagated", 3)]


def test_terminator_blocks_propagation():
    g = three_events([], [("towel", "lies_on", "ground")], [("man", "picks_up", "towel")])
    out, violations = apply_constraints(g, LEXICON)
    assert out == g and violations == []


def test_exclusive_state_blocks_propagation():
    g = three_events([("man", "sits_on", "bench")], [("man", "stands_on", "bench")], [])
    out, _ = apply_constraints(g, LEXICON)
    assert [t.relation for t in out.events[1].triplets] == ["stands_on"]


def test_empty_lexicon_is_identity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        g = random_graph(rng)
        assert apply_constraints(g, ConstraintLexicon.empty()) == (g, [])


def test_constraints_idempotent_and_valid():
    lexicon = parse_lexicon("exclude r0 r1\nexclude r2 r3\nstate r0\nstate r4\nterminate r0 r5\ncausal r1 r2\n")
    rng = np.random.default_rng(9)
    for _ in range(100):
        once, _ = apply_constraints(random_graph(rng), lexicon)
        twice, _ = apply_constraints(once, lexicon)
        assert twice == once
        assert validate(once).errors == ()


def test_lexicon_parse_errors():
    with pytest.raises(LexiconError):
        parse_lexicon("exclude holds holds\n")
    with pytest.raises(LexiconError):
        parse_lexicon("frobnicate holds\n")
    with pytest.raises(LexiconError):
        load_lexicon(FIXTURES / "missing.txt")


def test_default_lexicon_round_trips_through_text():
    lexicon = load_lexicon()
    assert parse_lexicon(lexicon.to_text()) == lexicon
    assert len(lexicon.exclusion_pairs) >= 30 and len(lexicon.state_relations) >= 15


# --- refinement ---------------------------------------------------------------------------------


def test_identity_refinement_is_fixed_point(mock):
    result = run_pipeline(mock, KITCHEN, lexicon=ConstraintLexicon.empty())
    assert result.refined == result.initial
    assert result.log.empty


def test_bench_refinement_log(mock):
    result = run_pipeline(mock, BENCH)
    assert [(e, t.as_tuple()) for e, t, _ in result.log.removed] == [(4, ("cat", "chases", "balloon"))]
    refined_adds = [(e, t.as_tuple()) for e, t, s in result.log.added if s != "state-propagated"]
    assert refined_adds == [(4, ("man", "lowers", "barbell")), (4, ("man", "presses", "barbell"))]
    kinds = [v["kind"] for v in result.log.violations]
    assert "timestamp-edit-rejected" in kinds
    assert result.refined.events[2].span.as_tuple() == (60.0, 95.0)


def test_overlapping_rewritten_spans_raise():
    g = build_graph("v", 20, [(0, 10, [("a", "b", "c")]), (10, 20, [("d", "e", "f")])])
    coarse = caption_set(5, 20.0, (0, 20, "x"))
    fine = caption_set(15, 20.0, (0, 20, "x"))
    text = "Event 1 [0.0–10.9 s]:\n  (a, b, c)\nEvent 2 [10.0–20.0 s]:\n  (d, e, f)\n"
    with pytest.raises(RefinementError):
        refine_graph(Canned(text), g, coarse, fine, ConstraintLexicon.empty())


def test_small_rewritten_overlap_is_repaired():
    g = build_graph("v", 20, [(0, 10, [("a", "b", "c")]), (10, 20, [("d", "e", "f")])])
    coarse = caption_set(5, 20.0, (0, 20, "x"))
    fine = caption_set(15, 20.0, (0, 20, "x"))
    text = "Event 1 [0.0–10.4 s]:\n  (a, b, c)\nEvent 2 [10.0–20.0 s]:\n  (d, e, f)\n"
    out, _ = refine_graph(Canned(text), g, coarse, fine, ConstraintLexicon.empty())
    assert out.events[0].span.end == out.events[1].span.start == 10.2


def test_refinement_unknown_event_raises():
    g = build_graph("v", 20, [(0, 10, [("a", "b", "c")])])
    coarse = caption_set(5, 20.0, (0, 10, "x"))
    with pytest.raises(RefinementError):
        refine_graph(Canned("Event 7 [0–10 s]:\n  (a, b, c)\n"), g, coarse, coarse, ConstraintLexicon.empty())


def test_refinement_missing_event_is_kept():
    g = build_graph("v", 20, [(0, 10, [("a", "b", "c")]), (10, 20, [("d", "e", "f")])])
    coarse = caption_set(5, 20.0, (0, 20, "x"))
    out, log = refine_graph(Canned("Event 1 [0–10 s]:\n  (a, b, c)\n"), g, coarse, coarse,
                            ConstraintLexicon.empty())
    assert out == g
    assert [v["kind"] for v in log.violations] == ["event-missing"]


# --- end to end --------------------------------------------------------------------------------


@pytest.mark.parametrize("video", [BENCH, KITCHEN])
def test_pipeline_matches_goldens_and_is_deterministic(mock, video):
    first = run_pipeline(mock, video).artifacts()
    second = run_pipeline(ScriptedMock.from_dir(FIXTURES / "mock"), video).artifacts()
    assert first == second
    for suffix, text in first.items():
        assert text == (FIXTURES / "golden" / f"{video.video_id}.{suffix}").read_text(encoding="utf-8"), suffix
    json.loads(first["refine_log.json"])
