"""Event-based video scene graph: data model, validation, canonical text form.

A graph is a list of timestamped event subgraphs (each a list of
subject/relation/object triplets) plus the full set of temporal precedence
edges ``(i, j)`` with ``events[i].end <= events[j].start``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Iterable, NamedTuple, Sequence

from .errors import GraphParseError, RangeError, SpanError, StructureError

__all__ = [
    "TimeSpan",
    "Triplet",
    "EventSubgraph",
    "EVSG",
    "Issue",
    "ValidationReport",
    "canonical_seconds",
    "temporal_edges",
    "build_graph",
    "validate",
    "serialize",
    "parse",
    "render_prompt",
    "render_triplet",
]

_TENTH = Decimal("0.1")
_WS = re.compile(r"\s+")

MIN_EVENT_SECONDS = 0.5


def canonical_seconds(value: float) -> float:
    """Round to 0.1 s, half-up on the decimal literal (``0.25 -> 0.3``)."""
    value = float(value)
    if not math.isfinite(value):
        raise SpanError(f"timestamp must be finite, got {value!r}")
    return float(Decimal(repr(value)).quantize(_TENTH, rounding=ROUND_HALF_UP))


@dataclass(frozen=True, order=True)
class TimeSpan:
    start: float
    end: float

    def __post_init__(self) -> None:
        start = canonical_seconds(self.start)
        end = canonical_seconds(self.end)
        if start < 0:
            raise SpanError(f"span start must be >= 0, got {start}")
        if start >= end:
            raise SpanError(f"span start must be < end, got [{start}, {end}]")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "end", end)

    @property
    def length(self) -> float:
        return self.end - self.start

    def overlap(self, other: TimeSpan) -> float:
        return max(0.0, min(self.end, other.end) - max(self.start, other.start))

    def as_tuple(self) -> tuple[float, float]:
        return (self.start, self.end)


def _norm_label(text: str) -> str:
    return _WS.sub(" ", str(text).strip().lower())


@dataclass(frozen=True, order=True)
class Triplet:
    """A subject/relation/object triple.

    Labels are lowercased with whitespace collapsed; relations additionally
    join words with underscores, so ``"Sits On"`` becomes ``sits_on``.
    """

    subject: str
    relation: str
    object: str

    def __post_init__(self) -> None:
        subject = _norm_label(self.subject)
        relation = _norm_label(self.relation).replace(" ", "_")
        obj = _norm_label(self.object)
        if not (subject and relation and obj):
            raise StructureError(
                f"triplet fields must be non-empty: ({self.subject!r}, {self.relation!r}, {self.object!r})"
            )
        object.__setattr__(self, "subject", subject)
        object.__setattr__(self, "relation", relation)
        object.__setattr__(self, "object", obj)

    def as_tuple(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.object)


@dataclass(frozen=True)
class EventSubgraph:
    index: int
    span: TimeSpan
    triplets: tuple[Triplet, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "triplets", tuple(self.triplets))

    @property
    def start(self) -> float:
        return self.span.start

    @property
    def end(self) -> float:
        return self.span.end


@dataclass(frozen=True)
class EVSG:
    video_id: str
    duration: float
    events: tuple[EventSubgraph, ...]
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "duration", canonical_seconds(self.duration))
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "edges", frozenset((int(i), int(j)) for i, j in self.edges))

    def __len__(self) -> int:
        return len(self.events)

    def event(self, index: int) -> EventSubgraph:
        for ev in self.events:
            if ev.index == index:
                return ev
        raise KeyError(index)

    def successors(self, index: int) -> list[int]:
        return sorted(j for i, j in self.edges if i == index)

    def predecessors(self, index: int) -> list[int]:
        return sorted(i for i, j in self.edges if j == index)

    def events_at(self, t: float) -> list[EventSubgraph]:
        """Events whose span contains ``t`` (closed interval)."""
        return [ev for ev in self.events if ev.start <= t <= ev.end]

    def find(self, subject: str | None = None, relation: str | None = None,
             object: str | None = None) -> list[tuple[int, Triplet]]:
        out = []
        for ev in self.events:
            for t in ev.triplets:
                if subject is not None and t.subject != _norm_label(subject):
                    continue
                if relation is not None and t.relation != _norm_label(relation).replace(" ", "_"):
                    continue
                if object is not None and t.object != _norm_label(object):
                    continue
                out.append((ev.index, t))
        return out


class Issue(NamedTuple):
    code: str
    message: str
    event: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Issue, ...] = ()
    warnings: tuple[Issue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict[str, Any]:
        return {
            "errors": [i._asdict() for i in self.errors],
            "warnings": [i._asdict() for i in self.warnings],
        }


def temporal_edges(events: Sequence[EventSubgraph]) -> frozenset[tuple[int, int]]:
    """All ordered pairs ``(i, j)`` with ``events[i].end <= events[j].start``."""
    for a, b in zip(events, events[1:]):
        if b.start < a.start:
            raise StructureError(
                f"events must be sorted by start (event {b.index} starts before event {a.index})"
            )
    edges = set()
    for a in events:
        for b in events:
            if a.end <= b.start:
                edges.add((a.index, b.index))
    return frozenset(edges)


def _sort_key(ev: EventSubgraph):
    return (ev.span.start, ev.span.end, ev.triplets)


def _coerce_event(item: Any) -> EventSubgraph:
    if isinstance(item, EventSubgraph):
        return item
    start, end, *rest = item
    triplets = rest[0] if rest else ()
    return EventSubgraph(0, TimeSpan(start, end), tuple(
        t if isinstance(t, Triplet) else Triplet(*t) for t in triplets
    ))


def build_graph(video_id: str, duration: float, events: Iterable[Any]) -> EVSG:
    """Sort, re-index and connect events.

    ``events`` holds :class:`EventSubgraph` objects (their index is ignored) or
    ``(start, end, triplets)`` tuples.
    """
    duration = canonical_seconds(duration)
    if duration <= 0:
        raise RangeError(f"duration must be > 0, got {duration}")
    evs = sorted((_coerce_event(e) for e in events), key=_sort_key)
    for ev in evs:
        if ev.end > duration:
            raise RangeError(
                f"event [{ev.start}, {ev.end}] lies outside video duration {duration}"
            )
    evs = [EventSubgraph(k, ev.span, ev.triplets) for k, ev in enumerate(evs, start=1)]
    return EVSG(str(video_id), duration, tuple(evs), temporal_edges(evs))


def validate(graph: EVSG, min_event_seconds: float = MIN_EVENT_SECONDS) -> ValidationReport:
    errors: list[Issue] = []
    warnings: list[Issue] = []
    events = graph.events

    if not graph.duration > 0:
        errors.append(Issue("duration-invalid", f"duration must be > 0, got {graph.duration}"))

    indices = [ev.index for ev in events]
    if indices != list(range(1, len(events) + 1)):
        errors.append(Issue("index-invalid", f"event indices must be 1..{len(events)} in order, got {indices}"))

    for a, b in zip(events, events[1:]):
        if b.start < a.start:
            errors.append(Issue("events-unsorted", f"event {b.index} starts before event {a.index}", b.index))

    for ev in events:
        if ev.start < 0 or ev.end > graph.duration:
            errors.append(Issue(
                "span-out-of-range",
                f"span [{ev.start}, {ev.end}] outside [0, {graph.duration}]", ev.index,
            ))
        if not ev.triplets:
            warnings.append(Issue("empty-triplets", "event has no relations", ev.index))
        if ev.span.length < min_event_seconds:
            warnings.append(Issue(
                "short-event", f"event lasts {ev.span.length:.1f} s (< {min_event_seconds} s)", ev.index,
            ))

    for a, b in zip(events, events[1:]):
        if a.end > b.start:
            warnings.append(Issue("event-overlap", f"events {a.index} and {b.index} overlap", b.index))

    known = set(indices)
    by_index = {ev.index: ev for ev in events}
    for i, j in sorted(graph.edges):
        if i not in known or j not in known:
            errors.append(Issue("edge-unknown-index", f"edge ({i}, {j}) references a missing event"))
        elif by_index[i].end > by_index[j].start:
            errors.append(Issue(
                "edge-inconsistent", f"edge ({i}, {j}) present but event {i} ends after event {j} starts", i,
            ))
    expected = {(a.index, b.index) for a in events for b in events if a.end <= b.start}
    for i, j in sorted(expected - graph.edges):
        errors.append(Issue("edge-inconsistent", f"edge ({i}, {j}) missing", i))

    return ValidationReport(tuple(errors), tuple(warnings))


# --- canonical text ----------------------------------------------------------

_TOP_KEYS = {"video_id", "duration", "events", "edges"}
_EVENT_KEYS = {"index", "start", "end", "triplets"}
_TRIPLET_KEYS = {"subject", "relation", "object"}


def _s(text: str) -> str:
    return json.dumps(text, ensure_ascii=False)


def serialize(graph: EVSG) -> str:
    """Canonical UTF-8 text: sorted keys, one-decimal seconds, trailing newline."""
    report = validate(graph)
    if report.errors:
        raise StructureError(f"cannot serialize invalid graph: {report.errors[0].message}")
    lines = ["{", f'  "duration": {graph.duration:.1f},']
    edges = sorted(graph.edges)
    if edges:
        lines.append('  "edges": [')
        lines.extend(
            f"    [{i}, {j}]" + ("," if k < len(edges) - 1 else "") for k, (i, j) in enumerate(edges)
        )
        lines.append("  ],")
    else:
        lines.append('  "edges": [],')
    if graph.events:
        lines.append('  "events": [')
        for k, ev in enumerate(graph.events):
            lines.append("    {")
            lines.append(f'      "end": {ev.end:.1f},')
            lines.append(f'      "index": {ev.index},')
            lines.append(f'      "start": {ev.start:.1f},')
            if ev.triplets:
                lines.append('      "triplets": [')
                for m, t in enumerate(ev.triplets):
                    sep = "," if m < len(ev.triplets) - 1 else ""
                    lines.append(
                        f'        {{"object": {_s(t.object)}, "relation": {_s(t.relation)}, '
                        f'"subject": {_s(t.subject)}}}{sep}'
                    )
                lines.append("      ]")
            else:
                lines.append('      "triplets": []')
            lines.append("    }" + ("," if k < len(graph.events) - 1 else ""))
        lines.append("  ],")
    else:
        lines.append('  "events": [],')
    lines.append(f'  "video_id": {_s(graph.video_id)}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _require_keys(obj: Any, keys: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise GraphParseError(f"{where} must be an object")
    unknown = sorted(set(obj) - keys)
    missing = sorted(keys - set(obj))
    if unknown:
        raise GraphParseError(f"{where} has unknown fields: {', '.join(unknown)}")
    if missing:
        raise GraphParseError(f"{where} is missing fields: {', '.join(missing)}")


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise GraphParseError(f"{where} must be a number")
    return float(value)


def from_dict(data: Any) -> EVSG:
    """Build a graph from decoded JSON, checking schema and invariants."""
    _require_keys(data, _TOP_KEYS, "graph")
    if not isinstance(data["video_id"], str):
        raise GraphParseError("video_id must be a string")
    if not isinstance(data["events"], list) or not isinstance(data["edges"], list):
        raise GraphParseError("events and edges must be arrays")
    events = []
    for n, raw in enumerate(data["events"]):
        _require_keys(raw, _EVENT_KEYS, f"events[{n}]")
        if isinstance(raw["index"], bool) or not isinstance(raw["index"], int):
            raise GraphParseError(f"events[{n}].index must be an integer")
        if not isinstance(raw["triplets"], list):
            raise GraphParseError(f"events[{n}].triplets must be an array")
        triplets = []
        for m, t in enumerate(raw["triplets"]):
            _require_keys(t, _TRIPLET_KEYS, f"events[{n}].triplets[{m}]")
            try:
                triplets.append(Triplet(t["subject"], t["relation"], t["object"]))
            except StructureError as exc:
                raise GraphParseError(f"events[{n}].triplets[{m}]: {exc}") from None
        try:
            span = TimeSpan(_number(raw["start"], f"events[{n}].start"), _number(raw["end"], f"events[{n}].end"))
        except SpanError as exc:
            raise GraphParseError(f"events[{n}]: {exc}") from None
        events.append(EventSubgraph(raw["index"], span, tuple(triplets)))
    indices = {ev.index for ev in events}
    if len(indices) != len(events):
        raise GraphParseError("duplicate event index")
    edges = []
    for n, pair in enumerate(data["edges"]):
        if (not isinstance(pair, list) or len(pair) != 2
                or not all(isinstance(x, int) and not isinstance(x, bool) for x in pair)):
            raise GraphParseError(f"edges[{n}] must be a pair of integers")
        for x in pair:
            if x not in indices:
                raise GraphParseError(f"edges[{n}] references unknown event index {x}")
        edges.append((pair[0], pair[1]))
    try:
        graph = EVSG(data["video_id"], _number(data["duration"], "duration"), tuple(events), frozenset(edges))
    except SpanError as exc:
        raise GraphParseError(str(exc)) from None
    report = validate(graph)
    if report.errors:
        raise GraphParseError(
            f"graph violates invariants: {report.errors[0].code}: {report.errors[0].message}", report=report
        )
    return graph


def parse(text: str) -> EVSG:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphParseError(exc.msg, line=exc.lineno, column=exc.colno) from None
    return from_dict(data)


def to_dict(graph: EVSG) -> dict[str, Any]:
    return json.loads(serialize(graph))


# --- prompt rendering --------------------------------------------------------

NO_RELATIONS = "(no relations)"


def render_triplet(t: Triplet) -> str:
    return f"({t.subject}, {t.relation}, {t.object})"


def render_prompt(graph: EVSG) -> str:
    """Plain-text graph block fed to the model, one header per event."""
    lines = []
    for ev in graph.events:
        lines.append(f"Event {ev.index} [{ev.start:.1f}–{ev.end:.1f} s]:")
        if ev.triplets:
            lines.extend(f"  {render_triplet(t)}" for t in ev.triplets)
        else:
            lines.append(f"  {NO_RELATIONS}")
    return "\n".join(lines) + "\n"
