"""Multi-grained dense captions: prompting, parsing and repair."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

from ..errors import CaptionParseError, DataError, LimitViolationError, OverlapError, SpanError
from ..graph import TimeSpan, canonical_seconds
from ..mllm import ChatClient, ChatRequest, Message
from .settings import PipelineSettings, check_limits
from .templates import PromptTemplates

log = logging.getLogger(__name__)

LEVELS = ("coarse", "middle", "fine")

_SEGMENT_LINE = re.compile(
    r"""^\s*(?:[-*•]\s*)?(?:\d+[.)]\s+)?
        [\[(]?\s*(\d+(?:\.\d+)?)\s*s?\s*(?:-|–|\u2014|\bto\b)\s*(\d+(?:\.\d+)?)\s*s?\s*[\])]?
        \s*[:.\-–]?\s*(\S.*?)\s*$""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class VideoRef:
    uri: str
    duration: float
    video_id: str = ""
    frame_count: int | None = None
    height: int | None = None
    width: int | None = None

    def __post_init__(self) -> None:
        if not self.duration > 0:
            raise DataError(f"video duration must be > 0, got {self.duration}")
        for name in ("frame_count", "height", "width"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise DataError(f"{name} must be positive, got {value}")
        if not self.video_id:
            stem = self.uri.rstrip("/").rsplit("/", 1)[-1].split("?")[0]
            object.__setattr__(self, "video_id", stem.rsplit(".", 1)[0] or stem)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> VideoRef:
        try:
            return cls(
                uri=str(data["uri"]),
                duration=float(data["duration"]),
                video_id=str(data.get("video_id", "")),
                frame_count=data.get("frame_count"),
                height=data.get("height"),
                width=data.get("width"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad manifest entry {data!r}: {exc}") from None


@dataclass(frozen=True)
class CaptionSegment:
    span: TimeSpan
    text: str


@dataclass(frozen=True)
class GrainedCaptionSet:
    limit: int
    duration: float
    segments: tuple[CaptionSegment, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        if not 1 <= len(self.segments) <= self.limit:
            raise LimitViolationError(
                f"{len(self.segments)} segments for an event limit of {self.limit}"
            )
        for a, b in zip(self.segments, self.segments[1:]):
            if b.span.start < a.span.end:
                raise OverlapError(f"segments [{a.span.start}, {a.span.end}] and "
                                   f"[{b.span.start}, {b.span.end}] overlap")
        if self.segments[-1].span.end > self.duration:
            raise DataError("segment extends past the video duration")

    @property
    def coverage(self) -> float:
        """Fraction of [0, duration] covered by segments."""
        return sum(s.span.length for s in self.segments) / self.duration

    def overlapping(self, span: TimeSpan) -> list[CaptionSegment]:
        return [s for s in self.segments if s.span.overlap(span) > 0]

    def numbered_text(self) -> str:
        return "".join(
            f"{k}. [{s.span.start:.1f}–{s.span.end:.1f} s] {s.text}\n"
            for k, s in enumerate(self.segments, start=1)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "limit": self.limit,
            "segments": [{"end": s.span.end, "start": s.span.start, "text": s.text} for s in self.segments],
        }


@dataclass(frozen=True)
class MultiGrainedCaptions:
    video_id: str
    duration: float
    coarse: GrainedCaptionSet
    middle: GrainedCaptionSet
    fine: GrainedCaptionSet

    def __post_init__(self) -> None:
        check_limits((self.coarse.limit, self.middle.limit, self.fine.limit))

    def level(self, name: str) -> GrainedCaptionSet:
        return getattr(self, name)

    def coverage_flags(self, min_coverage: float) -> list[str]:
        return [name for name in LEVELS if self.level(name).coverage < min_coverage]

    def to_json(self) -> str:
        body = {"duration": self.duration, "video_id": self.video_id}
        body.update({name: self.level(name).to_dict() for name in LEVELS})
        return json.dumps(body, sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> MultiGrainedCaptions:
        try:
            data = json.loads(text)
            duration = float(data["duration"])
            sets = {}
            for name in LEVELS:
                raw = data[name]
                segs = tuple(
                    CaptionSegment(TimeSpan(s["start"], s["end"]), str(s["text"])) for s in raw["segments"]
                )
                sets[name] = GrainedCaptionSet(int(raw["limit"]), duration, segs)
            return cls(str(data["video_id"]), duration, **sets)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, SpanError) as exc:
            raise DataError(f"malformed captions file: {exc}") from None


def repair_overlaps(spans: list[tuple[float, float]], tolerance: float) -> list[tuple[float, float]]:
    """Move boundaries of slightly overlapping neighbours to their midpoint.

    ``spans`` must be sorted by start. Overlaps above ``tolerance`` raise
    :class:`OverlapError`.
    """
    out = [list(s) for s in spans]
    for prev, cur in zip(out, out[1:]):
        overlap = round(prev[1] - cur[0], 6)
        if overlap <= 0:
            continue
        if overlap > tolerance:
            raise OverlapError(
                f"segments [{prev[0]}, {prev[1]}] and [{cur[0]}, {cur[1]}] overlap by {overlap:.1f} s "
                f"(tolerance {tolerance} s)"
            )
        mid = canonical_seconds((prev[1] + cur[0]) / 2)
        if not (prev[0] < mid < cur[1]):
            raise OverlapError(f"cannot repair overlap around {mid} s")
        prev[1] = cur[0] = mid
    return [(a, b) for a, b in out]


def parse_caption_response(text: str, limit: int, duration: float,
                           overlap_tolerance: float = 0.5) -> GrainedCaptionSet:
    raw: list[tuple[float, float, str]] = []
    for line in text.splitlines():
        m = _SEGMENT_LINE.match(line)
        if m:
            raw.append((float(m.group(1)), float(m.group(2)), m.group(3)))
    if not raw:
        raise CaptionParseError("no timestamped caption lines found in response", text)
    if len(raw) > limit:
        raise LimitViolationError(f"response has {len(raw)} segments but the event limit is {limit}")

    clamped = []
    for start, end, caption in raw:
        start, end = canonical_seconds(max(0.0, start)), canonical_seconds(min(duration, end))
        if start >= end:
            log.warning("dropping caption segment outside the video: %r", caption)
            continue
        clamped.append((start, end, caption))
    if not clamped:
        raise CaptionParseError("every caption segment fell outside the video", text)
    clamped.sort(key=lambda s: (s[0], s[1]))

    spans = repair_overlaps([(s, e) for s, e, _ in clamped], overlap_tolerance)
    segments = tuple(
        CaptionSegment(TimeSpan(s, e), caption) for (s, e), (_, _, caption) in zip(spans, clamped)
    )
    return GrainedCaptionSet(limit, canonical_seconds(duration), segments)


def caption_request(video: VideoRef, limit: int, settings: PipelineSettings,
                    templates: PromptTemplates) -> ChatRequest:
    prompt = templates.render("caption", duration=f"{canonical_seconds(video.duration):.1f}", limit=limit)
    return ChatRequest(
        messages=(Message("system", templates.render("system")), Message("user", prompt)),
        model_id=settings.model_id,
        video_ref=video.uri,
        temperature=settings.caption_temperature,
        max_tokens=settings.max_tokens,
    )


def generate_captions(client: ChatClient, video: VideoRef, settings: PipelineSettings | None = None,
                      templates: PromptTemplates | None = None) -> MultiGrainedCaptions:
    """One captioning call per granularity; the three calls run concurrently."""
    settings = settings or PipelineSettings()
    templates = templates or PromptTemplates.load()
    duration = canonical_seconds(video.duration)

    def run(limit: int) -> GrainedCaptionSet:
        response = client.complete(caption_request(video, limit, settings, templates))
        return parse_caption_response(response.text, limit, duration, settings.overlap_tolerance)

    with ThreadPoolExecutor(max_workers=3) as pool:
        coarse, middle, fine = pool.map(run, settings.limits)
    captions = MultiGrainedCaptions(video.video_id, duration, coarse, middle, fine)
    for name in captions.coverage_flags(settings.min_coverage):
        log.warning("%s: %s captions cover only %.0f%% of the video", video.video_id, name,
                    100 * captions.level(name).coverage)
    return captions
