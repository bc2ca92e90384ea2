"""Classification, localisation and text-generation metrics, plus the EvalReport row."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

from .heads import BBox

REPORT_COLUMNS = ("model_name", "accuracy", "recall_macro", "precision_macro", "f1_macro",
                  "mean_iou", "bleu", "rouge_l")
NA = "NA"


@dataclass
class ConfusionCounts:
    tp: list[int]
    fp: list[int]
    fn: list[int]
    tn: list[int]

    @property
    def num_classes(self) -> int:
        return len(self.tp)


def confusion_counts(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> ConfusionCounts:
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} labels vs {len(y_pred)} predictions")
    if len(y_true) == 0:
        raise ValueError("need at least one sample")
    for y in list(y_true) + list(y_pred):
        if not 0 <= y < num_classes:
            raise ValueError(f"label {y} out of range for {num_classes} classes")
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    for t, p in zip(y_true, y_pred):
        if t == p:
            tp[t] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    n = len(y_true)
    tn = [n - tp[c] - fp[c] - fn[c] for c in range(num_classes)]
    return ConfusionCounts(tp, fp, fn, tn)


def per_class_scores(counts: ConfusionCounts):
    """Per-class (precision, recall, f1) lists; empty denominators give 0."""
    prec, rec, f1 = [], [], []
    for c in range(counts.num_classes):
        tp = counts.tp[c]
        p = tp / (tp + counts.fp[c]) if tp + counts.fp[c] else 0.0
        r = tp / (tp + counts.fn[c]) if tp + counts.fn[c] else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return prec, rec, f1


def classification_metrics(y_true, y_pred, num_classes: int):
    """Return ``(accuracy, recall_macro, precision_macro, f1_macro)``."""
    counts = confusion_counts(y_true, y_pred, num_classes)
    prec, rec, f1 = per_class_scores(counts)
    accuracy = sum(counts.tp) / len(y_true)
    k = num_classes
    return accuracy, sum(rec) / k, sum(prec) / k, sum(f1) / k


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    # union / intersection written with side ratios (each >= 1) so tiny boxes cannot underflow
    ratio_a = ((a.x2 - a.x1) / iw) * ((a.y2 - a.y1) / ih)
    ratio_b = ((b.x2 - b.x1) / iw) * ((b.y2 - b.y1) / ih)
    return 1.0 / (ratio_a + ratio_b - 1.0)


def mean_iou(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mean_iou needs at least one box pair")
    return sum(iou(a, b) for a, b in pairs) / len(pairs)


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Sentence BLEU with clipped counts; add-one smoothing for n >= 2 only."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    c, r = len(candidate), len(reference)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        ref = _ngrams(reference, n)
        matches = sum((cand & ref).values())
        total = max(c - n + 1, 0)
        if n == 1:
            if matches == 0:
                return 0.0
            p = matches / total
        else:
            p = (matches + 1) / (total + 1)
        log_sum += math.log(p)
    bp = min(1.0, math.exp(1.0 - r / c))
    return bp * math.exp(log_sum / max_n)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    if len(candidate) == 0 or len(reference) == 0:
        raise ValueError("rouge_l needs non-empty candidate and reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


@dataclass
class EvalReport:
    """One model's metrics; ``None`` marks a task that was not evaluated."""

    model_name: str
    accuracy: float | None = None
    recall_macro: float | None = None
    precision_macro: float | None = None
    f1_macro: float | None = None
    mean_iou: float | None = None
    bleu: float | None = None
    rouge_l: float | None = None

    def __post_init__(self):
        for f in fields(self)[1:]:
            v = getattr(self, f.name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{f.name} must lie in [0, 1], got {v}")

    def to_row(self) -> list[str]:
        row = [self.model_name]
        for name in REPORT_COLUMNS[1:]:
            v = getattr(self, name)
            row.append(NA if v is None else repr(float(v)))
        return row

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "EvalReport":
        if len(row) != len(REPORT_COLUMNS):
            raise ValueError(f"expected {len(REPORT_COLUMNS)} columns, got {len(row)}")
        values = [None if v == NA else float(v) for v in row[1:]]
        return cls(row[0], *values)


def append_report(path: Path, report: EvalReport) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(REPORT_COLUMNS)
        writer.writerow(report.to_row())


def read_reports(path: Path) -> list[EvalReport]:
    """Parse a report CSV; errors name the offending line."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty report file")
    if tuple(rows[0]) != REPORT_COLUMNS:
        raise ValueError(f"{path}: line 1: header must be {','.join(REPORT_COLUMNS)}")
    reports = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            reports.append(EvalReport.from_row(row))
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
    if not reports:
        raise ValueError(f"{path}: no data rows")
    return reports
