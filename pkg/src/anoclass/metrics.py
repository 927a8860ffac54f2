"""Per-category confusion matrices and macro accuracy / macro F1 / Cohen's kappa.

The per-class accuracy term is TP / (TP + FP + FN), averaged over a
category's classes and then, unweighted, over categories. Predictions that
name no known class (the reserved ``Unparsed`` and ``Good`` labels) land in
an extra column: they add a false negative to the true class and a false
positive to no class, and they contribute to no column marginal in the
kappa chance term.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNPARSED = "Unparsed"
PREDICTED_GOOD = "Good"
RESERVED_PREDICTIONS = (UNPARSED, PREDICTED_GOOD)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """counts[i, j] = samples with true class i predicted class j; the last
    column collects reserved (off-list) predictions."""

    classes: tuple[str, ...]
    counts: np.ndarray  # (C, C + 1) int64

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(records, classes) -> ConfusionMatrix:
    """Tally (true_class, predicted_class) pairs against an ordered class list."""
    classes = tuple(classes)
    if not classes:
        raise ValueError("classes must be non-empty")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes) + 1), dtype=np.int64)
    for true_class, predicted in records:
        i = index.get(true_class)
        if i is None:
            raise ValueError(f"unknown true class: {true_class!r}")
        j = index.get(predicted)
        if j is None:
            if predicted not in RESERVED_PREDICTIONS:
                raise ValueError(
                    f"prediction {predicted!r} is neither a known class nor a "
                    f"reserved label {RESERVED_PREDICTIONS}"
                )
            j = len(classes)
        counts[i, j] += 1
    return ConfusionMatrix(classes=classes, counts=counts)


def per_class_counts(matrix: ConfusionMatrix) -> dict[str, tuple[int, int, int]]:
    """Per class: (TP, FP, FN). FP excludes the reserved column; FN includes it."""
    n = len(matrix.classes)
    diag = np.diag(matrix.counts[:, :n])
    col_sums = matrix.counts[:, :n].sum(axis=0)
    row_sums = matrix.counts.sum(axis=1)
    out = {}
    for i, cls in enumerate(matrix.classes):
        tp = int(diag[i])
        out[cls] = (tp, int(col_sums[i] - tp), int(row_sums[i] - tp))
    return out


def _supported_terms(matrix: ConfusionMatrix):
    terms = [
        (cls, tp, fp, fn)
        for cls, (tp, fp, fn) in per_class_counts(matrix).items()
        if tp + fp + fn > 0
    ]
    if not terms:
        raise ValueError("every class has zero support in this confusion matrix")
    return terms


def category_accuracy(matrix: ConfusionMatrix) -> float:
    """Mean over supported classes of TP / (TP + FP + FN)."""
    terms = _supported_terms(matrix)
    return float(np.mean([tp / (tp + fp + fn) for _, tp, fp, fn in terms]))


def class_f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom > 0 else 0.0


def category_f1(matrix: ConfusionMatrix) -> float:
    """Mean over supported classes of per-class F1."""
    terms = _supported_terms(matrix)
    return float(np.mean([class_f1(tp, fp, fn) for _, tp, fp, fn in terms]))


def cohens_kappa(matrix: ConfusionMatrix) -> float:
    """Chance-corrected agreement; the reserved column feeds no class's column
    marginal. Degenerate chance agreement (p_e = 1) maps to 1 when observed
    agreement is perfect, else 0."""
    total = matrix.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    n = len(matrix.classes)
    p_o = float(np.trace(matrix.counts[:, :n])) / total
    rows = matrix.counts.sum(axis=1) / total
    cols = matrix.counts[:, :n].sum(axis=0) / total
    p_e = float(rows @ cols)
    if p_e >= 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


@dataclass(frozen=True)
class CategoryMetrics:
    category: str
    acc: float
    f1: float
    kappa: float
    per_class: tuple[tuple[str, tuple[int, int, int, float]], ...] = ()
    confusion: ConfusionMatrix | None = None


def category_metrics(category: str, matrix: ConfusionMatrix) -> CategoryMetrics:
    per_class = tuple(
        (cls, (tp, fp, fn, class_f1(tp, fp, fn)))
        for cls, (tp, fp, fn) in per_class_counts(matrix).items()
    )
    return CategoryMetrics(
        category=category,
        acc=category_accuracy(matrix),
        f1=category_f1(matrix),
        kappa=cohens_kappa(matrix),
        per_class=per_class,
        confusion=matrix,
    )


@dataclass(frozen=True)
class MetricsReport:
    per_category: tuple[CategoryMetrics, ...]
    mean_acc: float
    mean_f1: float
    mean_kappa: float


def aggregate_report(per_category) -> MetricsReport:
    """Unweighted means over categories, categories ordered lexicographically."""
    entries = sorted(per_category, key=lambda m: m.category)
    if not entries:
        raise ValueError("aggregate_report needs at least one category")
    return MetricsReport(
        per_category=tuple(entries),
        mean_acc=float(np.mean([m.acc for m in entries])),
        mean_f1=float(np.mean([m.f1 for m in entries])),
        mean_kappa=float(np.mean([m.kappa for m in entries])),
    )


def report_to_dict(report: MetricsReport, config_digest: str | None = None) -> dict:
    payload = {
        "config_digest": config_digest,
        "mean": {
            "acc": report.mean_acc,
            "f1": report.mean_f1,
            "kappa": report.mean_kappa,
        },
        "per_category": [
            {
                "category": m.category,
                "acc": m.acc,
                "f1": m.f1,
                "kappa": m.kappa,
                "per_class": {
                    cls: {"tp": tp, "fp": fp, "fn": fn, "f1": f1}
                    for cls, (tp, fp, fn, f1) in m.per_class
                },
                "confusion": (
                    {
                        "classes": list(m.confusion.classes),
                        "counts": m.confusion.counts.tolist(),
                    }
                    if m.confusion is not None
                    else None
                ),
            }
            for m in report.per_category
        ],
    }
    return payload


def write_report(report: MetricsReport, path: str | Path, config_digest: str | None = None) -> None:
    Path(path).write_text(
        json.dumps(report_to_dict(report, config_digest), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def report_to_csv(report: MetricsReport) -> str:
    """Per-category rows plus a Mean row, values in percent."""
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["category", "acc", "f1", "kappa"])
    for m in report.per_category:
        writer.writerow(
            [m.category, f"{m.acc * 100:.2f}", f"{m.f1 * 100:.2f}", f"{m.kappa * 100:.2f}"]
        )
    writer.writerow(
        [
            "Mean",
            f"{report.mean_acc * 100:.2f}",
            f"{report.mean_f1 * 100:.2f}",
            f"{report.mean_kappa * 100:.2f}",
        ]
    )
    return buffer.getvalue()
