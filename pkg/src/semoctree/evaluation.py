"""Confusion matrix, overall accuracy and Cohen's kappa for transferred labels."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .core import NEW, DomainError, LabeledCloud

DEFAULT_CLASS_NAMES = {NEW: "new"}


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts with rows = ground truth and columns = prediction.

    ``classes[i]`` is the class id of row/column ``i``.
    """

    classes: tuple
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.classes)
        if counts.shape != (n, n):
            raise DomainError(f"counts must be {n}x{n}, got {counts.shape}")
        if (counts < 0).any():
            raise DomainError("confusion counts must be non-negative")
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        object.__setattr__(self, "counts", counts)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def index_of(self, class_id) -> int:
        return self.classes.index(int(class_id))

    def to_csv(self, class_names=None) -> str:
        names = _names(self.classes, class_names)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["truth\\pred"] + names)
        for name, row in zip(names, self.counts.tolist()):
            writer.writerow([name] + row)
        return buf.getvalue()


def _names(classes, class_names=None):
    lookup = dict(DEFAULT_CLASS_NAMES)
    if class_names:
        lookup.update({int(k): v for k, v in class_names.items()})
    return [str(lookup.get(c, c)) for c in classes]


def _labels_of(x, name):
    labels = x.labels if isinstance(x, LabeledCloud) else np.asarray(x)
    if labels is None:
        raise DomainError(f"{name} cloud is not labeled")
    return np.asarray(labels, dtype=np.int64)


def confusion_matrix(pred, truth, class_set, include_new=True) -> ConfusionMatrix:
    """Tally predicted against true labels over ``class_set`` (plus ``NEW``)."""
    p = _labels_of(pred, "prediction")
    t = _labels_of(truth, "truth")
    if len(p) != len(t):
        raise DomainError(f"prediction has {len(p)} points, truth has {len(t)}")
    classes = {int(c) for c in class_set}
    if include_new:
        classes.add(NEW)
    classes = sorted(classes)
    lookup = np.asarray(classes, dtype=np.int64)
    for labels, name in ((t, "truth"), (p, "prediction")):
        unknown = np.setdiff1d(np.unique(labels), lookup)
        if len(unknown):
            raise DomainError(f"{name} label {int(unknown[0])} is not in the class set {classes}")
    n = len(classes)
    ti = np.searchsorted(lookup, t)
    pi = np.searchsorted(lookup, p)
    counts = np.bincount(ti * n + pi, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(tuple(classes), counts)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise DomainError("overall accuracy of an empty confusion matrix")
    return int(np.trace(cm.counts)) / total


def _expected_agreement(cm):
    total = cm.total
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    # Exact integer numerator; Python ints do not overflow.
    return sum(int(r) * int(c) for r, c in zip(rows, cols)) / (total * total)


def cohen_kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement ``(p_o - p_e) / (1 - p_e)``."""
    total = cm.total
    if total == 0:
        raise DomainError("kappa of an empty confusion matrix")
    p_o = int(np.trace(cm.counts)) / total
    p_e = _expected_agreement(cm)
    if p_e == 1.0:
        if p_o == 1.0:
            return 1.0
        raise DomainError("kappa is undefined when expected agreement is 1")
    return (p_o - p_e) / (1.0 - p_e)


def per_class_scores(cm: ConfusionMatrix):
    """Recall and precision per class id; ``None`` where undefined."""
    diag = np.diag(cm.counts)
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    out = {}
    for i, c in enumerate(cm.classes):
        out[c] = {
            "support": int(rows[i]),
            "recall": int(diag[i]) / int(rows[i]) if rows[i] else None,
            "precision": int(diag[i]) / int(cols[i]) if cols[i] else None,
        }
    return out


def summarize(cm: ConfusionMatrix, report=None, max_lat=None, class_names=None, precision=9):
    """Metrics record for one run, rounded for stable serialisation."""

    def r(v):
        return None if v is None else round(float(v), precision)

    names = _names(cm.classes, class_names)
    per_class = {
        name: {"support": s["support"], "recall": r(s["recall"]), "precision": r(s["precision"])}
        for name, s in zip(names, per_class_scores(cm).values())
    }
    return {
        "overall_accuracy": r(overall_accuracy(cm)),
        "kappa": r(cohen_kappa(cm)),
        "per_class": per_class,
        "new_fraction": r(report.new_fraction) if report is not None else None,
        "max_lat_m": r(max_lat),
        "evaluated_points": cm.total,
        "convention": "rows=truth, columns=prediction",
    }


def metrics_table(records) -> str:
    """Plain-text table: lateral length, overall accuracy, kappa coefficient."""
    header = ("lateral length", "overall accuracy", "kappa coefficient")
    rows = []
    for rec in records:
        lat = rec.get("max_lat_m")
        lat_s = "-" if lat is None else f"{lat * 100:g} cm"
        rows.append((lat_s, f"{rec['overall_accuracy']:.3f}", f"{rec['kappa']:.3f}"))
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(header)]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    lines = [sep, "| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |", sep]
    for row in rows:
        lines.append("| " + " | ".join(v.ljust(w) for v, w in zip(row, widths)) + " |")
    lines.append(sep)
    return "\n".join(lines) + "\n"


def metrics_json(record) -> str:
    return json.dumps(record, indent=2, sort_keys=True)
