"""Grounded-QA evaluation metrics over prediction files.

mIoU, R@1 at IoU 0.3 / 0.5, answer accuracy and the joint Acc@IoU>=0.5.
IoU thresholds are inclusive, with a 1e-9 slack so that spans written in
decimal seconds whose IoU is exactly a threshold are not lost to rounding.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import DataError, DuplicateIdError, EmptySetError, PredictionFileError
from .rewards import Span, check_span, t_iou, token_f1

_CHOICE = re.compile(r"^\(?([A-Za-z])[).:]?(?:\s|$)")
_WS = re.compile(r"\s+")
_PUNCT = re.compile(r"[^\w\s]")
THRESHOLD_SLACK = 1e-9


@dataclass(frozen=True)
class AnswerMatcher:
    """Decides whether a predicted answer counts as correct.

    A ground truth that is a bare choice letter ("B", "(b)") is compared by
    letter, case-insensitively. Anything else uses normalized exact match, or
    token-F1 >= ``similarity_threshold`` when a threshold is set.
    """

    similarity_threshold: float | None = None

    def __post_init__(self) -> None:
        t = self.similarity_threshold
        if t is not None and not 0.0 < t <= 1.0:
            raise DataError(f"similarity threshold must be in (0, 1], got {t}")

    @staticmethod
    def choice_letter(text: str) -> str | None:
        m = _CHOICE.match(text.strip())
        return m.group(1).upper() if m else None

    @staticmethod
    def normalize(text: str) -> str:
        return _WS.sub(" ", _PUNCT.sub(" ", text.lower())).strip()

    def __call__(self, pred: str | None, gt: str) -> bool:
        if pred is None:
            return False
        gt_stripped = gt.strip()
        if len(gt_stripped.strip("()")) == 1 and gt_stripped.strip("()").isalpha():
            return self.choice_letter(pred) == gt_stripped.strip("()").upper()
        if self.similarity_threshold is None:
            return self.normalize(pred) == self.normalize(gt)
        return token_f1(pred, gt) >= self.similarity_threshold


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    pred_span: Span | None
    pred_answer: str
    gt_span: Span
    gt_answer: str
    answer_correct: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "gt_span", check_span(self.gt_span))

    @property
    def iou(self) -> float:
        return t_iou(self.pred_span, self.gt_span)

    @classmethod
    def from_dict(cls, data: dict[str, Any], matcher: AnswerMatcher = AnswerMatcher()) -> PredictionRecord:
        if not isinstance(data, dict):
            raise DataError("record must be an object")
        try:
            rid = data["id"]
            gt_span = data["gt_span"]
            gt_answer = str(data["gt_answer"])
        except KeyError as exc:
            raise DataError(f"missing field {exc.args[0]!r}") from None
        if not isinstance(rid, (str, int)) or isinstance(rid, bool):
            raise DataError("id must be a string or integer")
        pred_span = data.get("pred_span")
        # A malformed prediction is still a prediction: it scores IoU 0 rather than failing the file.
        pred = None
        if pred_span is not None:
            try:
                pred = check_span(pred_span)
            except (DataError, TypeError, ValueError, IndexError):
                pred = None
        pred_answer = "" if data.get("pred_answer") is None else str(data["pred_answer"])
        correct = data.get("answer_correct")
        if correct is None:
            correct = matcher(pred_answer, gt_answer)
        elif not isinstance(correct, bool):
            raise DataError("answer_correct must be a boolean")
        try:
            return cls(str(rid), pred, pred_answer, tuple(gt_span), gt_answer, correct)
        except (TypeError, ValueError, IndexError):
            raise DataError(f"malformed gt_span {gt_span!r}") from None


def parse_predictions(lines: Iterable[str], matcher: AnswerMatcher = AnswerMatcher()) -> list[PredictionRecord]:
    records: list[PredictionRecord] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = PredictionRecord.from_dict(json.loads(line), matcher)
        except json.JSONDecodeError as exc:
            raise PredictionFileError(f"invalid JSON: {exc.msg}", lineno) from None
        except DataError as exc:
            raise PredictionFileError(str(exc), lineno) from None
        if rec.id in seen:
            raise DuplicateIdError(f"duplicate id {rec.id!r} (first on line {seen[rec.id]})", lineno)
        seen[rec.id] = lineno
        records.append(rec)
    return records


def load_predictions(path: str | os.PathLike, matcher: AnswerMatcher = AnswerMatcher()) -> list[PredictionRecord]:
    path = Path(path)
    if not path.is_file():
        raise PredictionFileError(f"prediction file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return parse_predictions(fh, matcher)


@dataclass(frozen=True)
class MetricsReport:
    n_samples: int
    mIoU: float
    R1_at_03: float
    R1_at_05: float
    accuracy: float
    acc_at_iou05: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_samples": self.n_samples, "mIoU": self.mIoU, "R1_at_03": self.R1_at_03,
            "R1_at_05": self.R1_at_05, "accuracy": self.accuracy, "acc_at_iou05": self.acc_at_iou05,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        rows = [
            ("samples", str(self.n_samples)),
            ("mIoU", f"{100 * self.mIoU:.2f}"),
            ("R@1 IoU>=0.3", f"{100 * self.R1_at_03:.2f}"),
            ("R@1 IoU>=0.5", f"{100 * self.R1_at_05:.2f}"),
            ("Accuracy", f"{100 * self.accuracy:.2f}"),
            ("Acc@IoU>=0.5", f"{100 * self.acc_at_iou05:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "".join(f"{k.ljust(width)}  {v}\n" for k, v in rows)


def compute_metrics(records: Sequence[PredictionRecord]) -> MetricsReport:
    n = len(records)
    if n == 0:
        raise EmptySetError("no prediction records to evaluate")
    ious = [r.iou for r in records]
    hit03 = [i >= 0.3 - THRESHOLD_SLACK for i in ious]
    hit05 = [i >= 0.5 - THRESHOLD_SLACK for i in ious]
    acc = sum(r.answer_correct for r in records)
    joint = sum(r.answer_correct and h for r, h in zip(records, hit05))
    return MetricsReport(n, sum(ious) / n, sum(hit03) / n, sum(hit05) / n, acc / n, joint / n)


def write_report(report: MetricsReport, out_dir: str | os.PathLike, stem: str = "metrics") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text, summary = out / f"{stem}.txt", out / f"{stem}.json"
    text.write_text(report.to_text(), encoding="utf-8")
    summary.write_text(report.to_json(), encoding="utf-8")
    return text, summary
