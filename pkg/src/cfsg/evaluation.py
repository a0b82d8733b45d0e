"""Confusion matrices and the per-class accuracy / IoU metrics.

Rows are ground truth, columns predictions: ``cm[i, j]`` counts pixels of
true class ``i`` predicted as ``j``.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np


class AbsentClassWarning(UserWarning):
    """A class has no ground-truth pixels and was left out of the means."""


@dataclass
class Metrics:
    per_class_accuracy: np.ndarray
    per_class_iou: np.ndarray
    mean_class_accuracy: float
    mean_iou: float
    overall_accuracy: float
    absent_classes: tuple = ()


class ConfusionMatrix:
    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes):
            raise ValueError(f"counts must be {num_classes}x{num_classes}")
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        self.counts = counts

    def accumulate(self, predicted, truth) -> "ConfusionMatrix":
        predicted = np.asarray(predicted)
        truth = np.asarray(truth)
        if predicted.shape != truth.shape:
            raise ValueError(f"prediction shape {predicted.shape} != truth shape {truth.shape}")
        m = self.num_classes
        for name, arr in (("predicted", predicted), ("truth", truth)):
            if arr.size and (arr.min() < 0 or arr.max() >= m):
                raise ValueError(f"{name} contains class ids outside [0, {m})")
        flat = truth.astype(np.int64).ravel() * m + predicted.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=m * m).reshape(m, m)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def metrics(self) -> Metrics:
        return metrics(self)

    def to_csv(self, class_names=None) -> str:
        names = list(class_names or range(self.num_classes))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["truth\\predicted", *names])
        for name, row in zip(names, self.counts):
            writer.writerow([name, *row.tolist()])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        counts = np.array([[int(v) for v in row[1:]] for row in rows], dtype=np.int64)
        return cls(len(rows), counts)


def accumulate(cm: ConfusionMatrix, predicted, truth) -> ConfusionMatrix:
    return cm.accumulate(predicted, truth)


def metrics(cm: ConfusionMatrix) -> Metrics:
    counts = cm.counts.astype(np.float64)
    if counts.sum() == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(counts)
    truth_totals = counts.sum(axis=1)
    predicted_totals = counts.sum(axis=0)
    present = truth_totals > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(present, diag / truth_totals, np.nan)
        iou = np.where(present, diag / (truth_totals + predicted_totals - diag), np.nan)
    absent = tuple(int(i) for i in np.flatnonzero(~present))
    if absent:
        warnings.warn(f"classes {list(absent)} have no ground-truth pixels; excluded from means",
                      AbsentClassWarning, stacklevel=2)
    return Metrics(
        per_class_accuracy=acc,
        per_class_iou=iou,
        mean_class_accuracy=float(acc[present].mean()),
        mean_iou=float(iou[present].mean()),
        overall_accuracy=float(diag.sum() / counts.sum()),
        absent_classes=absent,
    )


def report_columns(class_names) -> list[str]:
    cols = []
    for name in class_names:
        cols += [f"{name}_OA", f"{name}_IOU"]
    return cols + ["mOA", "mIOU"]


def report(cm: ConfusionMatrix, class_names, fmt: str = "csv") -> str:
    """Per-class OA and IoU then mOA / mIOU, one row; ``fmt`` is ``csv`` or ``text``.

    ``class_names`` gives the column order and indexes the matrix classes in
    order (name ``k`` belongs to class id ``k``).
    """
    names = list(class_names)
    if len(names) != cm.num_classes:
        raise ValueError(f"need {cm.num_classes} class names, got {len(names)}")
    m = metrics(cm)
    values = []
    for k in range(cm.num_classes):
        values += [float(m.per_class_accuracy[k]), float(m.per_class_iou[k])]
    values += [m.mean_class_accuracy, m.mean_iou]
    columns = report_columns(names)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        writer.writerow([repr(v) for v in values])
        return buf.getvalue()
    if fmt == "text":
        width = max(8, *(len(c) for c in columns))
        head = " ".join(c.rjust(width) for c in columns)
        row = " ".join(f"{v:.3f}".rjust(width) for v in values)
        foot = f"pixel accuracy (trace/total): {m.overall_accuracy:.3f}"
        return "\n".join([head, row, foot]) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def parse_report_csv(text: str) -> dict:
    header, row = list(csv.reader(io.StringIO(text)))[:2]
    return {k: float(v) for k, v in zip(header, row)}
