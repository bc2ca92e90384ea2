"""Run a trained model over a corpus and aggregate the task metrics."""

from __future__ import annotations

from .heads import EOS
from .metrics import (EvalReport, bleu, classification_metrics, confusion_counts, iou,
                      per_class_scores, rouge_l)
from .model import Model

TASKS = ("classify", "localize", "generate")
BLEU_MAX_N = 2


def parse_tasks(text: str) -> tuple[str, ...]:
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in names if t not in TASKS]
    if bad or not names:
        raise ValueError(f"unknown task(s) {', '.join(bad) or '(none)'}; valid: {', '.join(TASKS)}")
    return names


def evaluate(model: Model, records, tasks=TASKS, name: str | None = None):
    """Return ``(EvalReport, details)``; details hold per-class scores."""
    records = list(records)
    if not records:
        raise ValueError("cannot evaluate on an empty corpus")
    cfg = model.config
    name = name or f"{cfg.modality}-{cfg.fusion}"
    y_true, y_pred, ious, bleus, rouges = [], [], [], [], []
    for rec in records:
        out = model.predict(rec, tasks)
        if "classify" in tasks:
            y_true.append(rec.label)
            y_pred.append(out["label"])
        if "localize" in tasks:
            ious.append(iou(out["box"], rec.box))
        if "generate" in tasks:
            ref = [t for t in rec.description if t != EOS]
            cand = out["tokens"]
            bleus.append(bleu(cand, ref, BLEU_MAX_N))
            rouges.append(rouge_l(cand, ref) if cand else 0.0)
    report = EvalReport(name)
    details: dict = {"cases": len(records), "tasks": list(tasks)}
    if "classify" in tasks:
        acc, rec_m, prec_m, f1_m = classification_metrics(y_true, y_pred, cfg.num_classes)
        report.accuracy, report.recall_macro, report.precision_macro, report.f1_macro = acc, rec_m, prec_m, f1_m
        prec, rec, f1 = per_class_scores(confusion_counts(y_true, y_pred, cfg.num_classes))
        details["per_class"] = {"precision": prec, "recall": rec, "f1": f1}
    if "localize" in tasks:
        report.mean_iou = sum(ious) / len(ious)
    if "generate" in tasks:
        report.bleu = sum(bleus) / len(bleus)
        report.rouge_l = sum(rouges) / len(rouges)
    return report, details
