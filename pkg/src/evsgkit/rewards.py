"""Composite reward for grounded video QA rollouts.

total = lambda_acc * r_acc + lambda_form * r_form + lambda_attn * gated(r_attn)
r_acc = alpha * r_sim + (1 - alpha) * r_tiou

Spans here are plain ``(start, end)`` float pairs and are not rounded to the
0.1 s grid used by graphs.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, SpanError

Span = tuple[float, float]
SimilarityScorer = Callable[[str, str], float]

# Tags may not nest or repeat: think content cannot contain think tags, etc.
_FORMAT = re.compile(
    r"\A\s*<think>(?:(?!</?think>|</?answer>).)*</think>\s*"
    r"<answer>(?:(?!</?think>|</?answer>).)*</answer>\s*\Z",
    re.DOTALL,
)
_THINK = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_ANSWER = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_SPAN = re.compile(r"from\s+(\d+(?:\.\d+)?)\s+to\s+(\d+(?:\.\d+)?)\s+seconds", re.IGNORECASE)
_ANSWER_TEXT = re.compile(r"Answer:\s*(.*?)\s*\Z", re.DOTALL)
_WORD = re.compile(r"[a-z0-9]+")


def check_span(span: Sequence[float]) -> Span:
    start, end = float(span[0]), float(span[1])
    if not (math.isfinite(start) and math.isfinite(end)) or start < 0 or start >= end:
        raise SpanError(f"invalid span [{start}, {end}]")
    return (start, end)


@dataclass(frozen=True)
class ModelOutput:
    raw_text: str
    think_text: str | None = None
    pred_span: Span | None = None
    pred_answer: str | None = None
    notes: tuple[str, ...] = ()


@dataclass(frozen=True)
class GroundTruth:
    gt_span: Span
    gt_answer: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "gt_span", check_span(self.gt_span))


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 0.3
    lambda_acc: float = 0.7
    lambda_form: float = 0.3
    lambda_attn: float = 0.6
    gate_sim: float = 0.4
    gate_tiou: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        for name in ("lambda_acc", "lambda_form", "lambda_attn"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("gate_sim", "gate_tiou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")

    @property
    def max_total(self) -> float:
        return self.lambda_acc + self.lambda_form + self.lambda_attn


@dataclass(frozen=True)
class AttentionDump:
    """Either a full response-by-context attention matrix with token groups,
    or the two precomputed group sums.

    Rows of ``matrix`` are response positions (``t_res`` selects them, all
    rows by default); ``t_vid`` and ``t_graph`` select columns.
    """

    sum_vid: float | None = None
    sum_graph: float | None = None
    matrix: np.ndarray | None = field(default=None, compare=False)
    t_res: tuple[int, ...] | None = None
    t_vid: tuple[int, ...] = ()
    t_graph: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.matrix is not None:
            m = np.asarray(self.matrix, dtype=float)
            if m.ndim != 2:
                raise DataError("attention matrix must be 2-D")
            if not np.all(np.isfinite(m)) or np.any(m < 0):
                raise DataError("attention entries must be finite and non-negative")
            object.__setattr__(self, "matrix", m)
            rows = tuple(range(m.shape[0])) if self.t_res is None else tuple(self.t_res)
            object.__setattr__(self, "t_res", rows)
            object.__setattr__(self, "t_vid", tuple(self.t_vid))
            object.__setattr__(self, "t_graph", tuple(self.t_graph))
            if set(self.t_vid) & set(self.t_graph):
                raise DataError("video and graph token groups overlap")
            if m.shape[0] == m.shape[1] and set(rows) & (set(self.t_vid) | set(self.t_graph)):
                raise DataError("response token group overlaps the video/graph groups")
            for idx, bound in ((rows, m.shape[0]), (self.t_vid, m.shape[1]), (self.t_graph, m.shape[1])):
                if any(not 0 <= i < bound for i in idx):
                    raise DataError("token index out of range")
        else:
            if self.sum_vid is None or self.sum_graph is None:
                raise DataError("attention dump needs a matrix or both group sums")
            for v in (self.sum_vid, self.sum_graph):
                if not math.isfinite(v) or v < 0:
                    raise DataError("attention sums must be finite and non-negative")

    def group_sums(self) -> tuple[float, float]:
        if self.matrix is None:
            return float(self.sum_vid), float(self.sum_graph)
        rows = list(self.t_res)
        vid = float(self.matrix[np.ix_(rows, list(self.t_vid))].sum()) if self.t_vid else 0.0
        graph = float(self.matrix[np.ix_(rows, list(self.t_graph))].sum()) if self.t_graph else 0.0
        return vid, graph

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AttentionDump:
        """``{sum_vid, sum_graph}`` or ``{rows, cols, values, t_res?, t_vid, t_graph}`` (row-major)."""
        try:
            if "values" in data:
                rows, cols = int(data["rows"]), int(data["cols"])
                values = np.asarray(data["values"], dtype=float)
                if values.size != rows * cols:
                    raise DataError(f"attention values: expected {rows * cols} entries, got {values.size}")
                t_res = data.get("t_res")
                return cls(
                    matrix=values.reshape(rows, cols),
                    t_res=None if t_res is None else tuple(int(i) for i in t_res),
                    t_vid=tuple(int(i) for i in data["t_vid"]),
                    t_graph=tuple(int(i) for i in data["t_graph"]),
                )
            return cls(sum_vid=float(data["sum_vid"]), sum_graph=float(data["sum_graph"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed attention dump: {exc}") from None


NEUTRAL_DUMP = AttentionDump(sum_vid=1.0, sum_graph=1.0)


@dataclass(frozen=True)
class RewardBreakdown:
    r_sim: float
    r_tiou: float
    r_acc: float
    r_form: float
    r_attn_raw: float
    r_attn_gated: float
    total: float
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "r_sim": self.r_sim, "r_tiou": self.r_tiou, "r_acc": self.r_acc, "r_form": self.r_form,
            "r_attn_raw": self.r_attn_raw, "r_attn_gated": self.r_attn_gated, "total": self.total,
            "notes": list(self.notes),
        }


def t_iou(pred: Sequence[float] | None, gt: Sequence[float]) -> float:
    """Temporal IoU; an absent or degenerate prediction scores 0."""
    if pred is None:
        return 0.0
    ps, pe = float(pred[0]), float(pred[1])
    gs, ge = float(gt[0]), float(gt[1])
    if not (math.isfinite(ps) and math.isfinite(pe)) or pe <= ps:
        return 0.0
    inter = max(0.0, min(pe, ge) - max(ps, gs))
    union = max(pe, ge) - min(ps, gs)
    return inter / union if union > 0 else 0.0


def _tokens(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def token_f1(pred: str | None, gt: str) -> float:
    if pred is None:
        return 0.0
    p, g = _tokens(pred), _tokens(gt)
    if not p or not g:
        return 1.0 if p == g and pred.strip().lower() == gt.strip().lower() else 0.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


def sim(pred_answer: str | None, gt_answer: str, scorer: SimilarityScorer | None = None) -> float:
    if pred_answer is None:
        return 0.0
    value = (scorer or token_f1)(pred_answer, gt_answer)
    return min(1.0, max(0.0, float(value)))


class EmbeddingScorer:
    """Cosine similarity of embeddings from an OpenAI-style ``/embeddings`` endpoint, clipped to [0, 1]."""

    def __init__(self, base_url: str, model: str, http=None, token: str | None = None):
        import httpx

        self.url = base_url.rstrip("/") + "/embeddings"
        self.model = model
        self._http = http or httpx.Client(timeout=60.0)
        self._headers = {"Authorization": f"Bearer {token}"} if token else {}

    def __call__(self, pred: str, gt: str) -> float:
        resp = self._http.post(self.url, json={"model": self.model, "input": [pred, gt]}, headers=self._headers)
        resp.raise_for_status()
        a, b = (np.asarray(d["embedding"], dtype=float) for d in resp.json()["data"])
        denom = float(np.linalg.norm(a) * np.linalg.norm(b))
        return 0.0 if denom == 0 else float(np.clip(a @ b / denom, 0.0, 1.0))


def r_acc(output: ModelOutput, gt: GroundTruth, weights: RewardWeights = RewardWeights(),
          scorer: SimilarityScorer | None = None) -> float:
    s = sim(output.pred_answer, gt.gt_answer, scorer)
    return weights.alpha * s + (1 - weights.alpha) * t_iou(output.pred_span, gt.gt_span)


def r_form(raw_text: str) -> int:
    return 1 if _FORMAT.match(raw_text) else 0


def r_attn(dump: AttentionDump | None) -> tuple[float, str | None]:
    """Share of response attention on video tokens vs graph tokens, plus an optional warning."""
    if dump is None:
        return 0.0, "no attention dump; visual attention reward is 0"
    vid, graph = dump.group_sums()
    if vid + graph <= 0:
        return 0.0, "attention on video and graph tokens is zero; visual attention reward is 0"
    return vid / (vid + graph), None


def gated_attn(r_attn_raw: float, r_sim: float, r_tiou: float,
               weights: RewardWeights = RewardWeights()) -> float:
    return r_attn_raw if (r_sim >= weights.gate_sim and r_tiou >= weights.gate_tiou) else 0.0


def parse_response(raw_text: str) -> ModelOutput:
    """Pull ``(span, answer)`` out of ``<answer>from X to Y seconds. Answer: Z</answer>``."""
    think = _THINK.search(raw_text)
    answer = _ANSWER.search(raw_text)
    notes: list[str] = []
    span = None
    answer_text = None
    if answer:
        block = answer.group(1)
        m = _SPAN.search(block)
        if m:
            start, end = float(m.group(1)), float(m.group(2))
            if start < end:
                span = (start, end)
            else:
                notes.append(f"degenerate span [{start}, {end}] ignored")
        m = _ANSWER_TEXT.search(block)
        if m and m.group(1):
            answer_text = m.group(1)
    return ModelOutput(raw_text, think.group(1) if think else None, span, answer_text, tuple(notes))


def composite(output: ModelOutput, gt: GroundTruth, dump: AttentionDump | None,
              weights: RewardWeights = RewardWeights(),
              scorer: SimilarityScorer | None = None) -> RewardBreakdown:
    notes = list(output.notes)
    s = sim(output.pred_answer, gt.gt_answer, scorer)
    tiou = t_iou(output.pred_span, gt.gt_span)
    acc = weights.alpha * s + (1 - weights.alpha) * tiou
    form = r_form(output.raw_text)
    raw_attn, warning = r_attn(dump)
    if warning:
        notes.append(warning)
    gated = gated_attn(raw_attn, s, tiou, weights)
    total = weights.lambda_acc * acc + weights.lambda_form * form + weights.lambda_attn * gated
    return RewardBreakdown(s, tiou, acc, float(form), raw_attn, gated, total, tuple(notes))


def score_text(raw_text: str, gt: GroundTruth, dump: AttentionDump | None = None,
               weights: RewardWeights = RewardWeights(),
               scorer: SimilarityScorer | None = None) -> RewardBreakdown:
    return composite(parse_response(raw_text), gt, dump, weights, scorer)
