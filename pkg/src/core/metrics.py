"""
Micro-averaged multi-label metrics and the comparison table.

Accuracy is label-wise: the share of (example, label) cells predicted
correctly. Precision and recall accumulate TP/FP/FN over the same cells.
"""

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import DEFAULT_THRESHOLD, REPORT_CSV_HEADER
from .errors import DataError, ShapeError
from utils.helpers import atomic_write_text, format_number

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    counts: ConfusionCounts
    per_label: Tuple[ConfusionCounts, ...] = ()
    # set when the denominator was 0 and the value fell back to 0
    precision_undefined: bool = False
    recall_undefined: bool = False

    @property
    def f1(self) -> float:
        if self.precision + self.recall == 0:
            return 0.0
        return 2 * self.precision * self.recall / (self.precision + self.recall)


def _as_matrix(values, name: str) -> np.ndarray:
    array = np.asarray(values)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"{name} must be a [B x m] matrix, got shape {list(array.shape)}")
    return array


def binarize(probs, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where prob >= threshold"""
    return (_as_matrix(probs, "probs") >= threshold).astype(np.int64)


def confusion_counts(pred, gold) -> ConfusionCounts:
    p, g = _as_matrix(pred, "pred").astype(bool), _as_matrix(gold, "gold").astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {list(p.shape)} does not match gold {list(g.shape)}")
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
    )


def per_label_counts(pred, gold) -> Tuple[ConfusionCounts, ...]:
    p, g = _as_matrix(pred, "pred"), _as_matrix(gold, "gold")
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {list(p.shape)} does not match gold {list(g.shape)}")
    return tuple(confusion_counts(p[:, j:j + 1], g[:, j:j + 1]) for j in range(p.shape[1]))


def compute_metrics(counts: ConfusionCounts, per_label: Sequence[ConfusionCounts] = ()) -> MetricsReport:
    if counts.total <= 0:
        raise DataError("cannot compute metrics over zero cells")
    predicted, actual = counts.tp + counts.fp, counts.tp + counts.fn
    return MetricsReport(
        accuracy=(counts.tp + counts.tn) / counts.total,
        precision=counts.tp / predicted if predicted else 0.0,
        recall=counts.tp / actual if actual else 0.0,
        counts=counts,
        per_label=tuple(per_label),
        precision_undefined=predicted == 0,
        recall_undefined=actual == 0,
    )


def evaluate_predictions(probs, gold, threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    """binarize -> counts -> report, keeping per-label counts for diagnostics"""
    pred = binarize(probs, threshold)
    report = compute_metrics(confusion_counts(pred, gold), per_label_counts(pred, gold))
    if report.precision_undefined:
        logger.warning("No positive predictions; precision reported as 0")
    return report


def percent(value: float) -> str:
    """Percentage with one decimal, rounding half up (0.7785 -> 77.9)"""
    scaled = Decimal(repr(float(value))) * 100
    return str(scaled.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def format_report(reports: Sequence[Tuple[str, MetricsReport]]) -> str:
    """
    Fixed-width comparison table. The first line names the columns; each
    following row is "<method>  <accuracy>  <precision>  <recall>" in percent.
    """
    if not reports:
        raise DataError("format_report needs at least one method")
    cells = [
        (name, percent(r.accuracy), percent(r.precision), percent(r.recall))
        for name, r in reports
    ]
    name_width = max(len(name) for name, *_ in cells)
    value_width = max(len(v) for _, *values in cells for v in values)
    lines = ["Method / Accuracy / Precision / Recall (%, micro-averaged)"]
    for name, *values in cells:
        lines.append(f"{name:<{name_width}}  " + "  ".join(f"{v:>{value_width}}" for v in values))
    return "\n".join(lines) + "\n"


def report_frame(reports: Sequence[Tuple[str, MetricsReport]]) -> pd.DataFrame:
    rows = [
        (name, format_number(r.accuracy), format_number(r.precision), format_number(r.recall))
        for name, r in reports
    ]
    return pd.DataFrame(rows, columns=REPORT_CSV_HEADER)


def write_report_csv(reports: Sequence[Tuple[str, MetricsReport]], path: str) -> None:
    """CSV method,accuracy,precision,recall"""
    atomic_write_text(path, report_frame(reports).to_csv(index=False, lineterminator="\n"))
