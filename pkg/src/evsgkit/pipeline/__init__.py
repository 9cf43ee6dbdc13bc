"""Caption-to-graph pipeline: multi-grained captions, initial graph, refinement."""

from __future__ import annotations

import json
from dataclasses import dataclass

from ..graph import EVSG, serialize
from ..mllm import ChatClient
from .captions import (
    CaptionSegment,
    GrainedCaptionSet,
    MultiGrainedCaptions,
    VideoRef,
    generate_captions,
    parse_caption_response,
)
from .consistency import ConsistencyReport, cross_level_check
from .constraints import ConstraintLexicon, Violation, apply_constraints, load_lexicon, parse_lexicon
from .extraction import generate_initial_graph, parse_graph_text
from .refine import RefinementLog, refine_graph
from .settings import DEFAULT_LIMITS, PipelineSettings
from .templates import PromptTemplates

__all__ = [
    "CaptionSegment",
    "ConsistencyReport",
    "ConstraintLexicon",
    "DEFAULT_LIMITS",
    "GrainedCaptionSet",
    "MultiGrainedCaptions",
    "PipelineResult",
    "PipelineSettings",
    "PromptTemplates",
    "RefinementLog",
    "VideoRef",
    "Violation",
    "apply_constraints",
    "cross_level_check",
    "generate_captions",
    "generate_initial_graph",
    "load_lexicon",
    "parse_caption_response",
    "parse_graph_text",
    "parse_lexicon",
    "refine_graph",
    "run_pipeline",
]


@dataclass(frozen=True)
class PipelineResult:
    captions: MultiGrainedCaptions
    consistency: ConsistencyReport
    initial: EVSG
    refined: EVSG
    log: RefinementLog

    def artifacts(self) -> dict[str, str]:
        """File name suffix -> canonical text."""
        return {
            "captions.json": self.captions.to_json(),
            "consistency.json": json.dumps(self.consistency.to_dict(), sort_keys=True, indent=2) + "\n",
            "init.json": serialize(self.initial),
            "graph.json": serialize(self.refined),
            "refine_log.json": self.log.to_json(),
        }


def unsupported_captions(captions: MultiGrainedCaptions, report: ConsistencyReport) -> list[str]:
    return [captions.middle.segments[k - 1].text for k in report.flagged]


def run_pipeline(client: ChatClient, video: VideoRef, settings: PipelineSettings | None = None,
                 templates: PromptTemplates | None = None,
                 lexicon: ConstraintLexicon | None = None) -> PipelineResult:
    settings = settings or PipelineSettings()
    templates = templates or PromptTemplates.load()
    lexicon = lexicon if lexicon is not None else load_lexicon()
    captions = generate_captions(client, video, settings, templates)
    report = cross_level_check(captions, settings.cross_level_threshold)
    initial = generate_initial_graph(client, captions.middle, captions.video_id, settings, templates)
    refined, log = refine_graph(
        client, initial, captions.coarse, captions.fine, lexicon, settings, templates,
        unsupported=unsupported_captions(captions, report),
    )
    return PipelineResult(captions, report, initial, refined, log)
