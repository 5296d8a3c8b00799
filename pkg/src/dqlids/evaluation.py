"""Confusion matrices and one-vs-rest classification metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import CLASS_NAMES

N_CLASSES = len(CLASS_NAMES)
# classes with fewer true records than this get a caveat in the report
LOW_SUPPORT = 200


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[p, t]``: records predicted as class p whose true class is t."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["predicted\\true", *CLASS_NAMES])
        for name, row in zip(CLASS_NAMES, self.counts):
            w.writerow([name, *(int(x) for x in row)])
        return buf.getvalue()


def build_confusion(predictions, labels, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions vs {labels.size} labels")
    for name, v in (("prediction", predictions), ("label", labels)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise ValueError(f"{name} outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (predictions, labels), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    support: int
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    precision_undefined: bool
    recall_undefined: bool
    low_support: bool


@dataclass(frozen=True)
class MetricsReport:
    per_class: tuple[ClassMetrics, ...]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_accuracy: float
    accuracy: float
    total: int

    def to_dict(self) -> dict:
        return {
            "overall": {"accuracy": self.accuracy, "total": self.total},
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
                "accuracy": self.macro_accuracy,
                "averaged_over": [c.name for c in self.per_class if c.support > 0],
            },
            "per_class": {c.name: {k: v for k, v in asdict(c).items() if k != "name"} for c in self.per_class},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def by_name(self, name: str) -> ClassMetrics:
        for c in self.per_class:
            if c.name == name:
                return c
        raise KeyError(name)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def compute_metrics(cm: ConfusionMatrix, names=CLASS_NAMES) -> MetricsReport:
    counts = cm.counts
    total = int(counts.sum())
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    per_class = []
    for c, name in enumerate(names):
        tp = int(counts[c, c])
        fp = int(rows[c]) - tp
        fn = int(cols[c]) - tp
        tn = total - tp - fp - fn
        precision, p_undef = _ratio(tp, tp + fp)
        recall, r_undef = _ratio(tp, tp + fn)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        per_class.append(ClassMetrics(
            name, int(cols[c]), tp, fp, fn, tn, precision, recall, f1, (tp + tn) / total,
            p_undef, r_undef, bool(0 < cols[c] < LOW_SUPPORT),
        ))
    present = [m for m in per_class if m.support > 0]

    def mean(attr):
        return sum(getattr(m, attr) for m in present) / len(present)

    return MetricsReport(
        tuple(per_class),
        mean("precision"), mean("recall"), mean("f1"), mean("accuracy"),
        int(np.trace(counts)) / total, total,
    )


def format_table(report: MetricsReport) -> str:
    lines = [f"{'class':<8}{'support':>9}{'precision':>11}{'recall':>9}{'f1':>9}{'accuracy':>10}"]
    for m in report.per_class:
        flag = ""
        if m.precision_undefined or m.recall_undefined:
            flag += "  (undefined ratio reported as 0)"
        if m.low_support:
            flag += "  (low support)"
        lines.append(f"{m.name:<8}{m.support:>9}{m.precision:>11.4f}{m.recall:>9.4f}{m.f1:>9.4f}{m.accuracy:>10.4f}{flag}")
    lines.append(f"{'macro':<8}{'':>9}{report.macro_precision:>11.4f}{report.macro_recall:>9.4f}"
                 f"{report.macro_f1:>9.4f}{report.macro_accuracy:>10.4f}")
    lines.append(f"overall accuracy {report.accuracy:.4f} on {report.total} records")
    return "\n".join(lines)
