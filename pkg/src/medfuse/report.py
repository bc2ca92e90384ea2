"""Comparison tables and bar charts built from EvalReport rows."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import NA, REPORT_COLUMNS, EvalReport  # noqa: E402

METRIC_LABELS = {
    "accuracy": "Accuracy",
    "recall_macro": "Recall (macro)",
    "precision_macro": "Precision (macro)",
    "f1_macro": "F1 (macro)",
    "mean_iou": "Mean IoU",
    "bleu": "BLEU",
    "rouge_l": "ROUGE-L",
}


def _cell(v: float | None) -> str:
    return NA if v is None else f"{v:.4f}"


def markdown_table(reports: list[EvalReport]) -> str:
    """One row per model in input order; recall/precision/F1 are macro averages."""
    metrics = REPORT_COLUMNS[1:]
    lines = [
        "Recall, precision and F1 are macro-averaged over classes; IoU is box IoU.",
        "",
        "| Model | " + " | ".join(METRIC_LABELS[m] for m in metrics) + " |",
        "|---|" + "---:|" * len(metrics),
    ]
    for r in reports:
        lines.append(f"| {r.model_name} | " + " | ".join(_cell(getattr(r, m)) for m in metrics) + " |")
    return "\n".join(lines) + "\n"


def bar_chart(reports: list[EvalReport], path: Path) -> None:
    """Grouped bars: one group per metric, one bar per model. NA values are left out."""
    metrics = REPORT_COLUMNS[1:]
    n = len(reports)
    width = 0.8 / max(n, 1)
    plt.rcParams["svg.hashsalt"] = "medfuse"
    fig, ax = plt.subplots(figsize=(9, 4))
    for k, rep in enumerate(reports):
        xs, ys, names = [], [], []
        for i, m in enumerate(metrics):
            v = getattr(rep, m)
            if v is not None:
                xs.append(i - 0.4 + width * (k + 0.5))
                ys.append(v)
                names.append(m)
        bars = ax.bar(xs, ys, width=width, label=rep.model_name)
        # ids let the SVG be grouped by metric downstream
        for bar, m in zip(bars, names):
            bar.set_gid(f"bar-{m}-{k}")
    ax.set_xticks(range(len(metrics)))
    ax.set_xticklabels([METRIC_LABELS[m] for m in metrics], rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend(fontsize=8, frameon=False)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
