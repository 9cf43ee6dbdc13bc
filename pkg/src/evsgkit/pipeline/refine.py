"""Graph refinement against coarse/fine captions, followed by the constraint post-pass."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

from ..errors import OverlapError, RefinementError, StructureError
from ..graph import EVSG, EventSubgraph, TimeSpan, Triplet, build_graph, render_prompt, validate
from ..mllm import ChatClient, ChatRequest, Message
from .captions import GrainedCaptionSet, repair_overlaps
from .consistency import content_tokens, token_overlap
from .constraints import ConstraintLexicon, apply_constraints
from .extraction import clamp_times, parse_graph_text
from .settings import PipelineSettings
from .templates import PromptTemplates

log = logging.getLogger(__name__)


@dataclass
class RefinementLog:
    removed: list[tuple[int, Triplet, str]] = field(default_factory=list)  # (event, triplet, reason)
    added: list[tuple[int, Triplet, str]] = field(default_factory=list)    # (event, triplet, source)
    violations: list[dict] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.removed or self.added or self.violations)

    def to_json(self) -> str:
        body = {
            "added": [{"event": e, "source": s, "triplet": list(t.as_tuple())} for e, t, s in self.added],
            "removed": [{"event": e, "reason": r, "triplet": list(t.as_tuple())} for e, t, r in self.removed],
            "violations": self.violations,
        }
        return json.dumps(body, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def refinement_request(g_init: EVSG, coarse: GrainedCaptionSet, fine: GrainedCaptionSet,
                       settings: PipelineSettings, templates: PromptTemplates,
                       unsupported: Sequence[str] = ()) -> ChatRequest:
    flags = ""
    if unsupported:
        flags = "Middle-level captions with little support at the other levels:\n" + "".join(
            f"- {text}\n" for text in unsupported
        )
    prompt = templates.render(
        "refine",
        duration=f"{g_init.duration:.1f}",
        graph=render_prompt(g_init),
        coarse=coarse.numbered_text(),
        fine=fine.numbered_text(),
        flags=flags,
    )
    return ChatRequest(
        messages=(Message("system", templates.render("system")), Message("user", prompt)),
        model_id=settings.model_id,
        temperature=settings.graph_temperature,
        max_tokens=settings.max_tokens,
    )


def _source_level(triplet: Triplet, span: TimeSpan, coarse: GrainedCaptionSet,
                  fine: GrainedCaptionSet) -> str:
    tokens = content_tokens(" ".join(triplet.as_tuple()).replace("_", " "))

    def support(level: GrainedCaptionSet) -> float:
        ref = frozenset().union(*(content_tokens(s.text) for s in level.overlapping(span)))
        return token_overlap(tokens, ref) if tokens else 0.0

    s_fine, s_coarse = support(fine), support(coarse)
    if s_fine == 0 and s_coarse == 0:
        return "model"
    return "fine" if s_fine >= s_coarse else "coarse"


def _span_changed(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] != b[0] or a[1] != b[1]


def refine_graph(client: ChatClient, g_init: EVSG, coarse: GrainedCaptionSet, fine: GrainedCaptionSet,
                 lexicon: ConstraintLexicon, settings: PipelineSettings | None = None,
                 templates: PromptTemplates | None = None,
                 unsupported: Sequence[str] = ()) -> tuple[EVSG, RefinementLog]:
    settings = settings or PipelineSettings()
    templates = templates or PromptTemplates.load()
    report = validate(g_init)
    if report.errors:
        raise RefinementError("initial graph is invalid", report)

    response = client.complete(refinement_request(g_init, coarse, fine, settings, templates, unsupported))
    parsed = parse_graph_text(response.text, strict=settings.strict_triplets)
    for w in parsed.warnings:
        log.warning("%s: %s", g_init.video_id, w)
    log_ = RefinementLog()

    by_number: dict[int, object] = {}
    for pe in parsed.events:
        if pe.number not in {ev.index for ev in g_init.events}:
            raise RefinementError(f"refinement introduced unknown event {pe.number}")
        if pe.number in by_number:
            raise RefinementError(f"refinement lists event {pe.number} twice")
        by_number[pe.number] = pe

    # (init event, new span, new triplets), in init order
    rows: list[tuple[EventSubgraph, tuple[float, float], tuple[Triplet, ...]]] = []
    tol = settings.timestamp_edit_tolerance
    for ev in g_init.events:
        pe = by_number.get(ev.index)
        if pe is None:
            log_.violations.append({
                "action": "report", "event": ev.index, "kind": "event-missing",
                "message": "refinement omitted this event; kept unchanged", "triplet": None,
            })
            rows.append((ev, ev.span.as_tuple(), ev.triplets))
            continue
        span = ev.span.as_tuple()
        if pe.times is not None:
            proposed = clamp_times(pe.times, g_init.duration)
            if max(abs(proposed[0] - span[0]), abs(proposed[1] - span[1])) > tol + 1e-9:
                log_.violations.append({
                    "action": "report", "event": ev.index, "kind": "timestamp-edit-rejected",
                    "message": f"proposed span {list(proposed)} moves more than {tol} s", "triplet": None,
                })
            elif proposed[0] < proposed[1]:
                span = proposed
        rows.append((ev, span, tuple(pe.triplets)))

    order = sorted(range(len(rows)), key=lambda k: (rows[k][1], k))
    spans = [rows[k][1] for k in order]
    changed = [_span_changed(rows[k][1], rows[k][0].span.as_tuple()) for k in order]
    for pos in range(len(spans) - 1):
        if not (changed[pos] or changed[pos + 1]):
            continue
        try:
            repaired = repair_overlaps([spans[pos], spans[pos + 1]], settings.overlap_tolerance)
        except OverlapError as exc:
            raise RefinementError(f"rewritten spans overlap: {exc}") from None
        spans[pos], spans[pos + 1] = repaired
    new_spans = {k: spans[n] for n, k in enumerate(order)}

    events = []
    for k, (ev, _, triplets) in enumerate(rows):
        try:
            events.append(EventSubgraph(ev.index, TimeSpan(*new_spans[k]), triplets))
        except Exception as exc:
            raise RefinementError(f"event {ev.index}: {exc}") from None
    try:
        refined = build_graph(g_init.video_id, g_init.duration, events)
    except StructureError as exc:
        raise RefinementError(str(exc)) from None

    # build_graph re-indexes by start time; map back to the init events for the diff.
    position = {id(e): n for n, e in enumerate(sorted(events, key=lambda e: (e.span.start, e.span.end, e.triplets)))}
    for k, (ev, _, triplets) in enumerate(rows):
        new_index = position[id(events[k])] + 1
        new_span = refined.events[new_index - 1].span
        for t in ev.triplets:
            if t not in triplets:
                log_.removed.append((new_index, t, "refinement"))
        for t in triplets:
            if t not in ev.triplets:
                log_.added.append((new_index, t, _source_level(t, new_span, coarse, fine)))

    final, violations = apply_constraints(refined, lexicon)
    for v in violations:
        if v.action == "dropped":
            log_.removed.append((v.event, v.triplet, v.kind))
        elif v.action == "added":
            log_.added.append((v.event, v.triplet, v.kind))
        log_.violations.append(v.to_dict())

    report = validate(final, settings.min_event_seconds)
    if report.errors:
        raise RefinementError("refined graph violates graph invariants", report)
    return final, log_
