"""Segmentation metrics and result tables.

Dataset-level numbers are computed from one confusion matrix accumulated
over every image, never by averaging per-image scores, so batch order and
batch size cannot change a result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RESULTS_COLUMNS = ("stage", "model", "attack", "split", "miou", "pixel_acc", "loss")


def confusion_matrix(pred: np.ndarray, true: np.ndarray, num_classes: int) -> np.ndarray:
    """(K,K) counts with true labels on rows and predictions on columns."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"pred shape {pred.shape} != true shape {true.shape}")
    if pred.size == 0:
        raise ValueError("cannot score an empty prediction")
    p = pred.reshape(-1).astype(np.int64)
    t = true.reshape(-1).astype(np.int64)
    if p.min() < 0 or p.max() >= num_classes or t.min() < 0 or t.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    return np.bincount(t * num_classes + p, minlength=num_classes * num_classes) \
        .reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray, count_empty_as_zero: bool = False):
    """(mean_iou, per_class) from a confusion matrix.

    A class with zero union (absent from both prediction and truth) has no
    defined IoU; it is reported as NaN and excluded from the mean unless
    ``count_empty_as_zero`` forces it in as 0.
    """
    intersection = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    per_class = np.full(cm.shape[0], np.nan)
    present = union > 0
    per_class[present] = intersection[present] / union[present]
    if count_empty_as_zero:
        scores = np.where(present, per_class, 0.0)
        return float(scores.mean()), per_class
    if not present.any():
        raise ValueError("no class has a nonzero union")
    return float(per_class[present].mean()), per_class


def mean_iou(pred, true, num_classes: int, count_empty_as_zero: bool = False):
    """Class-mean intersection-over-union; returns (mean, per_class)."""
    return iou_from_confusion(confusion_matrix(pred, true, num_classes),
                              count_empty_as_zero=count_empty_as_zero)


def pixel_accuracy(pred, true) -> float:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"pred shape {pred.shape} != true shape {true.shape}")
    if pred.size == 0:
        raise ValueError("cannot score an empty prediction")
    return float((pred == true).mean())


@dataclass
class MetricReport:
    """Aggregate scores for one model on one split under one attack tag."""

    mean_iou: float
    per_class_iou: np.ndarray
    pixel_accuracy: float
    mean_loss: float
    attack_tag: str = "clean"
    image_count: int = 0

    def as_row(self, stage: str, model: str, split: str) -> dict:
        return {
            "stage": stage,
            "model": model,
            "attack": self.attack_tag,
            "split": split,
            "miou": self.mean_iou,
            "pixel_acc": self.pixel_accuracy,
            "loss": self.mean_loss,
        }


def _fmt(value) -> str:
    if isinstance(value, float) or isinstance(value, np.floating):
        return f"{value:.2f}"
    return str(value)


def emit_table(rows, layout: str = "generic", fmt: str = "markdown") -> str:
    """Render result rows as a table.

    ``layout="generic"`` prints one row per record with the record's keys as
    columns. ``layout="split_metrics"`` pivots to one column per model and
    one row per (split, metric) pair, the usual at-a-glance summary shape:
    Train IoU / Train Loss / Val IoU / ... with the attack tag appended to
    the row label when it is not "clean". Floats are rendered to 2 decimals
    in both layouts; ``fmt`` is "markdown" or "csv".
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to render")
    if layout == "generic":
        header = list(rows[0].keys())
        body = [[_fmt(r[k]) for k in header] for r in rows]
    elif layout == "split_metrics":
        models = sorted({r["model"] for r in rows})
        header = ["metric"] + models
        body = []
        seen = []
        for r in rows:
            tag = r.get("attack", "clean")
            suffix = "" if tag in ("clean", "", None) else f" ({tag})"
            for metric, key in (("IoU", "miou"), ("Loss", "loss")):
                label = f"{r['split'].capitalize()} {metric}{suffix}"
                if label not in seen:
                    seen.append(label)
        for label in seen:
            line = [label]
            for model in models:
                value = ""
                for r in rows:
                    tag = r.get("attack", "clean")
                    suffix = "" if tag in ("clean", "", None) else f" ({tag})"
                    for metric, key in (("IoU", "miou"), ("Loss", "loss")):
                        if (f"{r['split'].capitalize()} {metric}{suffix}" == label
                                and r["model"] == model):
                            value = _fmt(r[key])
                line.append(value)
            body.append(line)
    else:
        raise ValueError(f"unknown layout {layout!r}")

    if fmt == "csv":
        return "\n".join(",".join(line) for line in [header] + body) + "\n"
    if fmt == "markdown":
        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
        def render(line):
            return "| " + " | ".join(v.ljust(w) for v, w in zip(line, widths)) + " |"
        sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        return "\n".join([render(header), sep] + [render(line) for line in body]) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def results_csv_text(rows) -> str:
    """Serialize result rows in the fixed results schema with stable float
    formatting (6 decimals), suitable for byte-for-byte comparison."""
    lines = [",".join(RESULTS_COLUMNS)]
    for r in rows:
        rendered = []
        for key in RESULTS_COLUMNS:
            value = r[key]
            if isinstance(value, (float, np.floating)):
                rendered.append(f"{value:.6f}")
            else:
                rendered.append(str(value))
        lines.append(",".join(rendered))
    return "\n".join(lines) + "\n"


def parse_results_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = tuple(lines[0].split(","))
    if header != RESULTS_COLUMNS:
        raise ValueError(f"unexpected results header {header}")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        row = dict(zip(RESULTS_COLUMNS, parts))
        for key in ("miou", "pixel_acc", "loss"):
            row[key] = float(row[key])
        out.append(row)
    return out
