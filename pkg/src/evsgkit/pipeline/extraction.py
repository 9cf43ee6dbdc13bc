"""Parsing event-block graph text and building the initial graph."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from ..errors import ExtractionError, StructureError
from ..graph import EVSG, NO_RELATIONS, EventSubgraph, TimeSpan, Triplet, build_graph, canonical_seconds
from ..mllm import ChatClient, ChatRequest, Message
from .captions import GrainedCaptionSet
from .settings import PipelineSettings
from .templates import PromptTemplates

log = logging.getLogger(__name__)

_HEADER = re.compile(r"^\s*[#*]*\s*event\s+(\d+)\s*(?:\[(.*?)\])?\s*[*]*\s*:?\s*[*]*\s*$", re.IGNORECASE)
_TIMES = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*s?\s*(?:-|–|\u2014|\bto\b)\s*(\d+(?:\.\d+)?)\s*s?\s*$")
_TRIPLET = re.compile(
    r"^\s*(?:[-*•]\s*)?[(<⟨〈]\s*([^,()<>⟨⟩〈〉]+?)\s*,\s*([^,()<>⟨⟩〈〉]+?)\s*,\s*([^,()<>⟨⟩〈〉]+?)\s*[)>⟩〉]\s*$"
)


@dataclass
class ParsedEvent:
    number: int
    times: tuple[float, float] | None
    triplets: list[Triplet] = field(default_factory=list)
    line: int = 0


@dataclass
class ParsedGraphText:
    events: list[ParsedEvent]
    warnings: list[str]


def parse_graph_text(text: str, strict: bool = False) -> ParsedGraphText:
    """Read ``Event k [s–e s]:`` blocks followed by ``(subject, relation, object)`` lines.

    Lines before the first header are ignored. Inside a block, lines that are
    not triplets are skipped with a warning, or raise in strict mode.
    """
    events: list[ParsedEvent] = []
    warnings: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        header = _HEADER.match(line)
        if header:
            times = None
            if header.group(2) is not None:
                tm = _TIMES.match(header.group(2))
                if tm:
                    times = (float(tm.group(1)), float(tm.group(2)))
            events.append(ParsedEvent(int(header.group(1)), times, line=lineno))
            continue
        if not events:
            continue
        if line.strip().lower() == NO_RELATIONS:
            continue
        m = _TRIPLET.match(line)
        triplet = None
        if m:
            try:
                triplet = Triplet(*m.groups())
            except StructureError:
                triplet = None
        if triplet is None:
            message = f"line {lineno}: not a (subject, relation, object) triplet: {line.strip()!r}"
            if strict:
                raise ExtractionError(message, event=events[-1].number)
            warnings.append(message)
            continue
        if triplet not in events[-1].triplets:
            events[-1].triplets.append(triplet)
    return ParsedGraphText(events, warnings)


def clamp_times(times: tuple[float, float], duration: float) -> tuple[float, float]:
    return canonical_seconds(max(0.0, times[0])), canonical_seconds(min(duration, times[1]))


def extraction_request(middle: GrainedCaptionSet, settings: PipelineSettings,
                       templates: PromptTemplates) -> ChatRequest:
    prompt = templates.render("extract", duration=f"{middle.duration:.1f}", captions=middle.numbered_text())
    return ChatRequest(
        messages=(Message("system", templates.render("system")), Message("user", prompt)),
        model_id=settings.model_id,
        temperature=settings.graph_temperature,
        max_tokens=settings.max_tokens,
    )


def generate_initial_graph(client: ChatClient, middle: GrainedCaptionSet, video_id: str,
                           settings: PipelineSettings | None = None,
                           templates: PromptTemplates | None = None) -> EVSG:
    """Map each middle-grained caption to a timestamped event subgraph."""
    settings = settings or PipelineSettings()
    templates = templates or PromptTemplates.load()
    response = client.complete(extraction_request(middle, settings, templates))
    parsed = parse_graph_text(response.text, strict=settings.strict_triplets)
    for w in parsed.warnings:
        log.warning("%s: %s", video_id, w)
    if not parsed.events:
        raise ExtractionError("response contains no event blocks")

    events = []
    for pe in parsed.events:
        if pe.times is None:
            raise ExtractionError(f"event {pe.number} has no start/end timestamps", event=pe.number)
        start, end = clamp_times(pe.times, middle.duration)
        if start >= end:
            raise ExtractionError(
                f"event {pe.number} has an empty span after clamping: {pe.times}", event=pe.number
            )
        events.append(EventSubgraph(pe.number, TimeSpan(start, end), tuple(pe.triplets)))
    return build_graph(video_id, middle.duration, events)
