"""Cross-level support check between caption granularities."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .captions import GrainedCaptionSet, MultiGrainedCaptions

_TOKEN = re.compile(r"[a-z0-9]+")

STOPWORDS = frozenset("""
a an the and or but of to in on at by for with from into onto over under up down out off
is are was were be been being it its this that these those then than there here his her
their them they he she we you i who which what while as so just also very again still
has have had do does did not no now after before during until some any each another other
""".split())


def content_tokens(text: str) -> frozenset[str]:
    return frozenset(t for t in _TOKEN.findall(text.lower()) if t not in STOPWORDS)


def token_overlap(tokens: frozenset[str], reference: frozenset[str]) -> float:
    """Share of ``tokens`` that also occur in ``reference``; 1.0 when ``tokens`` is empty."""
    if not tokens:
        return 1.0
    return len(tokens & reference) / len(tokens)


@dataclass(frozen=True)
class SegmentSupport:
    index: int  # 1-based position in the middle set
    overlap_coarse: float
    overlap_fine: float
    flagged: bool


@dataclass(frozen=True)
class ConsistencyReport:
    threshold: float
    segments: tuple[SegmentSupport, ...]

    @property
    def flagged(self) -> list[int]:
        return [s.index for s in self.segments if s.flagged]

    def to_dict(self) -> dict:
        return {
            "flagged": self.flagged,
            "segments": [s.__dict__ for s in self.segments],
            "threshold": self.threshold,
        }


def _support(tokens: frozenset[str], seg_span, level: GrainedCaptionSet) -> float:
    reference: frozenset[str] = frozenset()
    for other in level.overlapping(seg_span):
        reference |= content_tokens(other.text)
    return token_overlap(tokens, reference)


def cross_level_check(captions: MultiGrainedCaptions, threshold: float = 0.1) -> ConsistencyReport:
    """Flag middle segments poorly supported by both the coarse and fine levels."""
    rows = []
    for k, seg in enumerate(captions.middle.segments, start=1):
        tokens = content_tokens(seg.text)
        coarse = _support(tokens, seg.span, captions.coarse)
        fine = _support(tokens, seg.span, captions.fine)
        rows.append(SegmentSupport(k, coarse, fine, coarse < threshold and fine < threshold))
    return ConsistencyReport(threshold, tuple(rows))
