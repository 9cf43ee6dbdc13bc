"""Event-based video scene graphs: captioning pipeline, rewards, GRPO toy lab and evaluation."""

from __future__ import annotations

from .errors import ConfigError, DataError, EndpointFailure, EvsgError
from .graph import EVSG, EventSubgraph, TimeSpan, Triplet, build_graph, parse, render_prompt, serialize, validate
from .metrics import MetricsReport, PredictionRecord, compute_metrics, load_predictions
from .rewards import AttentionDump, GroundTruth, RewardBreakdown, RewardWeights, composite, score_text, t_iou

__version__ = "0.1.0"

__all__ = [
    "AttentionDump", "ConfigError", "DataError", "EVSG", "EndpointFailure", "EventSubgraph", "EvsgError",
    "GroundTruth", "MetricsReport", "PredictionRecord", "RewardBreakdown", "RewardWeights", "TimeSpan",
    "Triplet", "build_graph", "composite", "compute_metrics", "load_predictions", "parse", "render_prompt",
    "score_text", "serialize", "t_iou", "validate",
]
