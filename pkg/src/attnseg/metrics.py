"""Segmentation metrics computed from a shared confusion matrix.

Rows of the matrix are ground-truth classes, columns predicted classes.
A class absent from both ground truth and prediction is "undefined" and is
left out of means (``nan`` in per-class lists) unless ``absent="zero"``.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    pass


class ConfusionMatrix:
    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes) or (counts < 0).any():
                raise ValueError("counts must be a non-negative K x K integer matrix")
            self.counts = counts.copy()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        if pred.size == 0:
            return self
        k = self.num_classes
        for name, arr in (("pred", pred), ("gt", gt)):
            if arr.min() < 0 or arr.max() >= k:
                raise ValueError(f"{name} contains class indices outside [0, {k})")
        flat = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def _parts(cm: ConfusionMatrix):
    c = cm.counts.astype(np.float64)
    if cm.total == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    return tp, fp, fn


def defined_classes(cm: ConfusionMatrix) -> np.ndarray:
    """Mask of classes present in ground truth or prediction."""
    return (cm.counts.sum(axis=0) + cm.counts.sum(axis=1)) > 0


def _mean(values: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        raise UndefinedMetricError("no class is defined for this metric")
    return float(values[mask].mean())


def _absent_mask(cm, absent):
    if absent == "exclude":
        return defined_classes(cm)
    if absent == "zero":
        return np.ones(cm.num_classes, dtype=bool)
    raise ValueError("absent must be 'exclude' or 'zero'")


def iou(cm: ConfusionMatrix, include_background: bool = True, absent: str = "exclude"):
    tp, fp, fn = _parts(cm)
    union = tp + fp + fn
    per = np.full(cm.num_classes, np.nan)
    np.divide(tp, union, out=per, where=union > 0)
    mask = _absent_mask(cm, absent)
    if absent == "zero":
        per = np.nan_to_num(per, nan=0.0)
    if not include_background:
        mask = mask.copy()
        mask[0] = False
    return per.tolist(), _mean(per, mask)


def fwiou(cm: ConfusionMatrix) -> float:
    per, _ = iou(cm)
    freq = cm.counts.sum(axis=1) / cm.total
    per = np.nan_to_num(np.asarray(per), nan=0.0)
    return float((freq * per).sum())


def ciw_iou(cm: ConfusionMatrix, weights: Sequence[float]) -> float:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (cm.num_classes,):
        raise ValueError(f"need {cm.num_classes} class weights, got {w.shape}")
    per, _ = iou(cm)
    mask = defined_classes(cm)
    ws = w[mask]
    if not mask.any() or ws.sum() <= 0:
        raise UndefinedMetricError("no weighted class is defined")
    return float((ws * np.asarray(per)[mask]).sum() / ws.sum())


def f1(cm: ConfusionMatrix, absent: str = "exclude"):
    tp, fp, fn = _parts(cm)
    prec = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    rec = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
    denom = prec + rec
    per = np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
    mask = _absent_mask(cm, absent)
    per_list = np.where(defined_classes(cm) | (absent == "zero"), per, np.nan)
    return per_list.tolist(), _mean(per, mask)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    tp, _, fn = _parts(cm)
    support = tp + fn
    present = support > 0
    return _mean(np.divide(tp, support, out=np.zeros_like(tp), where=present), present)


def mcc(cm: ConfusionMatrix) -> float:
    c = cm.counts.astype(np.float64)
    if cm.total == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    s = c.sum()
    correct = np.trace(c)
    p = c.sum(axis=0)
    t = c.sum(axis=1)
    cov = correct * s - (p * t).sum()
    a = s * s - (p * p).sum()
    b = s * s - (t * t).sum()
    if a == 0 or b == 0:
        return 0.0
    return float(cov / math.sqrt(a * b))


REPORT_KEYS = ("iou_bg", "iou_nobg", "fwiou", "ciw_iou", "f1", "balanced_acc", "mcc")

# Column order of the ablation comparison table.
TABLE_COLUMNS = ("iou_bg", "iou_nobg", "fwiou", "f1", "balanced_acc", "mcc")


def report(cm: ConfusionMatrix, class_names: Sequence[str], ciw: Sequence[float]) -> dict:
    """Full metrics record. Values that are undefined for this matrix are ``None``."""

    def safe(fn):
        try:
            return fn()
        except UndefinedMetricError:
            return None

    per_iou, mean_iou = iou(cm, True)
    nobg = safe(lambda: iou(cm, False)[1])
    per_f1, macro_f1 = f1(cm)
    tp, fp, fn = _parts(cm)
    recall = np.divide(tp, tp + fn, out=np.full_like(tp, np.nan), where=(tp + fn) > 0)

    def clean(xs):
        return [None if (x is None or (isinstance(x, float) and math.isnan(x))) else float(x) for x in xs]

    return {
        "iou_bg": mean_iou,
        "iou_nobg": nobg,
        "fwiou": fwiou(cm),
        "ciw_iou": safe(lambda: ciw_iou(cm, ciw)),
        "f1": macro_f1,
        "balanced_acc": balanced_accuracy(cm),
        "mcc": mcc(cm),
        "per_class": {
            "names": list(class_names),
            "iou": clean(per_iou),
            "f1": clean(per_f1),
            "recall": clean(recall.tolist()),
            "support": cm.counts.sum(axis=1).tolist(),
        },
        "confusion_matrix": cm.counts.tolist(),
    }


def format_report(rep: dict) -> str:
    lines = []
    for k in REPORT_KEYS:
        v = rep[k]
        lines.append(f"{k:>13}: {'n/a' if v is None else f'{v:.5f}'}")
    pc = rep["per_class"]
    lines.append(f"{'class':<24}{'IoU':>9}{'F1':>9}{'recall':>9}{'support':>10}")
    for i, name in enumerate(pc["names"]):
        cells = [pc["iou"][i], pc["f1"][i], pc["recall"][i]]
        txt = "".join(f"{'-' if c is None else f'{c:.4f}':>9}" for c in cells)
        lines.append(f"{name:<24}{txt}{pc['support'][i]:>10}")
    return "\n".join(lines)


def write_report(rep: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rep, indent=2))
