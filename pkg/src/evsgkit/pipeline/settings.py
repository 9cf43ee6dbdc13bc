from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError

DEFAULT_LIMITS = (5, 10, 15)


@dataclass(frozen=True)
class PipelineSettings:
    model_id: str = "qwen2.5-vl-7b-instruct"
    limits: tuple[int, int, int] = DEFAULT_LIMITS
    caption_temperature: float = 0.2
    graph_temperature: float = 0.0
    max_tokens: int = 2048
    overlap_tolerance: float = 0.5     # seconds; larger overlaps are errors
    min_coverage: float = 0.95
    cross_level_threshold: float = 0.1
    timestamp_edit_tolerance: float = 1.0  # seconds a refinement may move a boundary
    strict_triplets: bool = False
    min_event_seconds: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "limits", tuple(int(x) for x in self.limits))
        check_limits(self.limits)


def check_limits(limits) -> None:
    if len(limits) != 3:
        raise ConfigError(f"need three event limits (coarse, middle, fine), got {limits}")
    if any(x < 1 for x in limits):
        raise ConfigError(f"event limits must be >= 1, got {limits}")
    if not limits[0] < limits[1] < limits[2]:
        raise ConfigError(f"event limits must be strictly increasing, got {limits}")
