"""Wire models for reward scoring: batch records and service requests share one schema."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import DataError
from .rewards import AttentionDump, GroundTruth, RewardBreakdown, RewardWeights, SimilarityScorer, score_text


class AttentionSums(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sum_vid: float = Field(ge=0)
    sum_graph: float = Field(ge=0)


class AttentionMatrix(BaseModel):
    """Row-major attention values with token index groups."""

    model_config = ConfigDict(extra="forbid")

    rows: int = Field(gt=0)
    cols: int = Field(gt=0)
    values: list[float]
    t_res: Optional[list[int]] = None
    t_vid: list[int]
    t_graph: list[int]

    @model_validator(mode="after")
    def _size(self) -> AttentionMatrix:
        if len(self.values) != self.rows * self.cols:
            raise ValueError(f"expected {self.rows * self.cols} values, got {len(self.values)}")
        return self


class RewardRequest(BaseModel):
    """One sample to score.

    ``attention`` carries the dump inline; ``attention_ref`` names a JSON dump
    file relative to the batch file and is only accepted in batch mode.
    """

    model_config = ConfigDict(extra="forbid")

    id: str
    raw_text: str
    gt_span: tuple[float, float]
    gt_answer: str
    attention: Optional[AttentionSums | AttentionMatrix] = None
    attention_ref: Optional[str] = None

    @field_validator("id", mode="before")
    @classmethod
    def _id_to_str(cls, value: Any) -> Any:
        return str(value) if isinstance(value, int) and not isinstance(value, bool) else value

    @model_validator(mode="after")
    def _one_dump(self) -> RewardRequest:
        if self.attention is not None and self.attention_ref is not None:
            raise ValueError("give either attention or attention_ref, not both")
        return self

    def dump(self, base_dir: Path | None = None) -> AttentionDump | None:
        if self.attention is not None:
            return AttentionDump.from_dict(self.attention.model_dump(exclude_none=True))
        if self.attention_ref is None:
            return None
        if base_dir is None:
            raise DataError("attention_ref is only accepted in batch mode; send the dump inline")
        path = base_dir / self.attention_ref
        if not path.is_file():
            raise DataError(f"attention dump not found: {path}")
        try:
            return AttentionDump.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DataError(f"attention dump {path} is not valid JSON: {exc.msg}") from None


class RewardResponse(BaseModel):
    id: str
    r_sim: float
    r_tiou: float
    r_acc: float
    r_form: float
    r_attn_raw: float
    r_attn_gated: float
    total: float
    notes: list[str] = []

    @classmethod
    def from_breakdown(cls, rid: str, b: RewardBreakdown) -> RewardResponse:
        return cls(id=rid, **b.to_dict())


class ErrorEntry(BaseModel):
    id: Optional[str] = None
    line: Optional[int] = None
    error: str


class Health(BaseModel):
    status: str


def score_request(request: RewardRequest, weights: RewardWeights = RewardWeights(),
                  scorer: SimilarityScorer | None = None, base_dir: Path | None = None) -> RewardResponse:
    gt = GroundTruth(request.gt_span, request.gt_answer)
    breakdown = score_text(request.raw_text, gt, request.dump(base_dir), weights, scorer)
    return RewardResponse.from_breakdown(request.id, breakdown)
