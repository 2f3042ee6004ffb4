"""Segmentation metrics, localization detection accounting, Cohen's kappa and report files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

METRIC_COLUMNS = ["Dice", "IoU", "Precision", "Recall"]


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __iadd__(self, other: "ClassCounts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.tn += other.tn
        return self


def _ratio(num: int, den: int, absent: bool) -> float:
    # class absent from both prediction and ground truth counts as perfect
    if absent:
        return 1.0
    return num / den if den else 0.0


def scores(c: ClassCounts) -> dict[str, float]:
    absent = c.tp == 0 and c.fp == 0 and c.fn == 0
    return {
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, absent),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, absent),
        "precision": _ratio(c.tp, c.tp + c.fp, absent),
        "recall": _ratio(c.tp, c.tp + c.fn, absent),
    }


@dataclass
class MetricsReport:
    class_names: list[str]
    counts: list[ClassCounts]
    n_slices: int = 1
    per_slice_macro: Optional[dict[str, float]] = None
    # all non-background classes merged into one foreground class
    foreground_counts: Optional[ClassCounts] = None

    @property
    def per_class(self) -> list[dict[str, float]]:
        return [scores(c) for c in self.counts]

    @property
    def macro(self) -> dict[str, float]:
        pcs = self.per_class
        return {k: float(np.mean([p[k] for p in pcs])) for k in ("dice", "iou", "precision", "recall")}

    @property
    def foreground(self) -> dict[str, float]:
        if self.foreground_counts is None:
            return scores(self.counts[1])
        return scores(self.foreground_counts)

    def row(self, which: str = "macro") -> list[float]:
        d = self.macro if which == "macro" else self.foreground
        return [d["dice"], d["iou"], d["precision"], d["recall"]]


def _foreground_counts(pred_c: np.ndarray, gt_c: np.ndarray) -> ClassCounts:
    return confusion_counts(np.asarray(pred_c)[1:].any(axis=0)[None], np.asarray(gt_c)[1:].any(axis=0)[None])[0]


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> list[ClassCounts]:
    """Per-class TP/FP/FN/TN from one-hot ``C x ...`` arrays."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    out = []
    for c in range(pred.shape[0]):
        p, g = pred[c], gt[c]
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        out.append(ClassCounts(tp, fp, fn, int(p.size - tp - fp - fn)))
    return out


def segmentation_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray, class_names: Sequence[str] | None = None) -> MetricsReport:
    """Per-class and macro Dice/IoU/precision/recall for one-hot ``C x H x W`` (or ``N x C x H x W``) masks."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {gt_mask.shape}")
    if pred_mask.ndim == 4:
        pred_c = np.moveaxis(pred_mask, 1, 0)
        gt_c = np.moveaxis(gt_mask, 1, 0)
        n = pred_mask.shape[0]
    else:
        pred_c, gt_c, n = pred_mask, gt_mask, 1
    C = pred_c.shape[0]
    names = list(class_names) if class_names else [f"class{c}" for c in range(C)]
    return MetricsReport(names, confusion_counts(pred_c, gt_c), n, foreground_counts=_foreground_counts(pred_c, gt_c))


def aggregate(pairs: Iterable[tuple[np.ndarray, np.ndarray]], class_names: Sequence[str] | None = None) -> MetricsReport:
    """Pooled-confusion metrics over many slices, plus the mean of per-slice macro scores."""
    pooled = None
    fg = ClassCounts()
    per_slice = []
    n = 0
    names = None
    for pred, gt in pairs:
        r = segmentation_metrics(pred, gt, class_names)
        names = r.class_names
        if pooled is None:
            pooled = [ClassCounts() for _ in r.counts]
        for acc, c in zip(pooled, r.counts):
            acc += c
        fg += r.foreground_counts
        per_slice.append(r.macro)
        n += 1
    if pooled is None:
        raise ValueError("no slices to aggregate")
    per_slice_macro = {k: float(np.mean([m[k] for m in per_slice])) for k in per_slice[0]}
    return MetricsReport(names, pooled, n, per_slice_macro, fg)


def probabilities_to_one_hot(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """``C x H x W`` (or batched) probabilities to one-hot; a single channel is thresholded."""
    probs = np.asarray(probs)
    axis = probs.ndim - 3
    if probs.shape[axis] == 1:
        fg = np.take(probs, 0, axis=axis) >= threshold
        return np.stack([~fg, fg], axis=axis).astype(np.float32)
    idx = probs.argmax(axis=axis)
    C = probs.shape[axis]
    return np.stack([idx == c for c in range(C)], axis=axis).astype(np.float32)


# ---------------------------------------------------------------- detection

@dataclass
class DetectionRecord:
    slice_id: str
    left_detected: bool
    right_detected: bool
    failure_reason: str = ""

    @property
    def detected(self) -> bool:
        return self.left_detected and self.right_detected


def side_detected(center: Optional[tuple[float, float]], gt_side: np.ndarray, roi_size=(64, 64), col_offset: int = 0) -> tuple[bool, str]:
    """Center inside the ground-truth bounding box and the ROI around it covering all foreground."""
    if center is None:
        return False, "no component"
    rows, cols = np.nonzero(gt_side)
    if rows.size == 0:
        return False, "no ground truth"
    cols = cols + col_offset
    r, c = center
    if not (rows.min() <= r <= rows.max() and cols.min() <= c <= cols.max()):
        return False, "center outside vessel"
    r0 = int(r) - roi_size[0] // 2
    c0 = int(c) - roi_size[1] // 2
    inside = (rows >= r0) & (rows < r0 + roi_size[0]) & (cols >= c0) & (cols < c0 + roi_size[1])
    if not inside.all():
        return False, "vessel cut off by ROI"
    return True, ""


def detection_record(slice_id: str, left_center, right_center, gt_foreground: np.ndarray, roi_size=(64, 64)) -> DetectionRecord:
    mid = gt_foreground.shape[-1] // 2
    ok_l, why_l = side_detected(left_center, gt_foreground[:, :mid], roi_size)
    ok_r, why_r = side_detected(right_center, gt_foreground[:, mid:], roi_size, col_offset=mid)
    reasons = [f"left: {why_l}"] * (not ok_l) + [f"right: {why_r}"] * (not ok_r)
    return DetectionRecord(slice_id, ok_l, ok_r, "; ".join(reasons))


def detection_rate(records: Sequence[DetectionRecord]) -> tuple[float, list[DetectionRecord]]:
    """Fraction of slices where both sides were found, and the failing records."""
    if not records:
        raise ValueError("no detection records")
    failed = [r for r in records if not r.detected]
    return (len(records) - len(failed)) / len(records), failed


# ---------------------------------------------------------------- agreement

def cohens_kappa(ratings_a: Sequence, ratings_b: Sequence, categories: Optional[Sequence] = None) -> float:
    if len(ratings_a) != len(ratings_b):
        raise ValueError("rating lists differ in length")
    if not ratings_a:
        raise ValueError("no ratings")
    cats = list(categories) if categories is not None else sorted(set(ratings_a) | set(ratings_b))
    index = {c: i for i, c in enumerate(cats)}
    table = np.zeros((len(cats), len(cats)))
    for a, b in zip(ratings_a, ratings_b):
        table[index[a], index[b]] += 1
    n = table.sum()
    p_o = np.trace(table) / n
    p_e = float((table.sum(axis=1) / n) @ (table.sum(axis=0) / n))
    if p_e >= 1.0:
        return 1.0
    return float((p_o - p_e) / (1 - p_e))


# ---------------------------------------------------------------- reports

HISTORY_COLUMNS = ["epoch", "step", "train_loss", "sup_loss", "con_loss", "prior_loss", "val_loss", "val_dice", "lr", "lambda_t", "tau_t"]


def read_history(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for rec in history:
        w.writerow([_fmt(rec.get(k)) for k in HISTORY_COLUMNS])
    return buf.getvalue()


def metrics_table_csv(rows: dict[str, Sequence[float]]) -> str:
    """Rows keyed by method name; columns Dice, IoU, Precision, Recall (4 decimals)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Method"] + METRIC_COLUMNS)
    for name, vals in rows.items():
        w.writerow([name] + [f"{v:.4f}" for v in vals])
    return buf.getvalue()


def metrics_table_text(rows: dict[str, Sequence[float]]) -> str:
    """The same table as LaTeX-style rows: ``name & dice & iou & precision & recall``."""
    lines = [" & " + " & ".join(METRIC_COLUMNS) + r" \\"]
    for name, vals in rows.items():
        lines.append(name + " & " + " & ".join(f"{v:.4f}" for v in vals) + r" \\")
    return "\n".join(lines) + "\n"


def emit_report(
    history: Sequence[dict],
    metrics: dict[str, Sequence[float]] | None,
    out_dir: str | Path,
    score_differences: Sequence[float] | None = None,
    plots: bool = True,
) -> list[Path]:
    """Write history.csv, metrics.csv and (optionally) loss-curve / histogram PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    p = out_dir / "history.csv"
    p.write_text(history_csv(history))
    written.append(p)
    if metrics is not None:
        p = out_dir / "metrics.csv"
        p.write_text(metrics_table_csv(metrics))
        written.append(p)
        p = out_dir / "metrics.tex"
        p.write_text(metrics_table_text(metrics))
        written.append(p)
    if plots and history:
        written.append(_plot_curves(history, out_dir / "loss_curves.png"))
    if plots and score_differences is not None and len(score_differences):
        written.append(_plot_hist(score_differences, out_dir / "score_differences.png"))
    return written


def _plot_curves(history, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, [h.get("train_loss") for h in history], label="train")
    if any(h.get("val_loss") is not None for h in history):
        ax.plot(epochs, [h.get("val_loss") for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _plot_hist(values, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.hist(values, bins=np.arange(-3.25, 3.5, 0.5))
    ax.set_xlabel("score difference (prediction - ground truth)")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
