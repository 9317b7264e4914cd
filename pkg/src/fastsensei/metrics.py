"""Confusion matrix and per-class precision / recall / IoU."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import CLASS_NAMES, IGNORE


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))
    ignored: int = 0

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)

    def binary(self) -> "ConfusionMatrix":
        """Collapse classes 1.. into a single cloud class (clear vs cloud)."""
        groups = [[0], list(range(1, self.n_classes))]
        merged = np.array([[self.counts[np.ix_(r, c)].sum() for c in groups] for r in groups], dtype=np.int64)
        return ConfusionMatrix(merged, self.ignored)


def update_confusion(cm: ConfusionMatrix, pred, truth, ignore_label: int = IGNORE) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(np.int64).reshape(-1)
    truth = np.asarray(truth).astype(np.int64).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    k = cm.n_classes
    keep = truth != ignore_label
    t, p = truth[keep], pred[keep]
    if ((t < 0) | (t >= k)).any() or ((p < 0) | (p >= k)).any():
        raise ValueError("label out of range")
    cm.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    cm.ignored += int((~keep).sum())
    return cm


def class_metrics(cm: ConfusionMatrix) -> dict:
    """Per-class precision, recall, IoU and their mean IoU.

    A 0/0 ratio is 1.0 when the class is absent from both truth and prediction
    (flagged in ``absent``), and 0.0 otherwise.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    absent = (tp + fp + fn) == 0

    def ratio(num, den):
        out = np.where(absent, 1.0, 0.0)
        np.divide(num, den, out=out, where=den > 0)
        return out

    iou = ratio(tp, tp + fp + fn)
    return {
        "precision": ratio(tp, tp + fp),
        "recall": ratio(tp, tp + fn),
        "iou": iou,
        "miou": float(iou.mean()),
        "absent": absent,
    }


def report(cm: ConfusionMatrix, binary: bool = False) -> tuple[str, str]:
    """Text table (Prec / Rec / IoU per class, then mIoU, in percent) and a JSON line."""
    if binary:
        cm = cm.binary()
        names = ("Clear", "Cloud")
    else:
        names = CLASS_NAMES
    m = class_metrics(cm)
    header = " | ".join(f"{n:^23}" for n in names) + " | All classes"
    sub = " | ".join("  Prec    Rec    IoU  " for _ in names) + " |    mIoU"
    vals = " | ".join(
        f"{100 * m['precision'][i]:6.2f} {100 * m['recall'][i]:6.2f} {100 * m['iou'][i]:6.2f} "
        for i in range(len(names))
    ) + f" | {100 * m['miou']:7.2f}"
    text = "\n".join([header, sub, vals])
    record = {
        "classes": list(names),
        "precision": [float(v) for v in m["precision"]],
        "recall": [float(v) for v in m["recall"]],
        "iou": [float(v) for v in m["iou"]],
        "miou": m["miou"],
        "absent": [bool(v) for v in m["absent"]],
        "pixels": int(cm.counts.sum()),
        "ignored": cm.ignored,
    }
    return text, json.dumps(record)
