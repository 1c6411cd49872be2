"""
ON/OFF classification metrics per appliance target, and the per-target
report layout (one row per target plus an unweighted ``average`` row).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import RejectedInputError
from .models import ConfusionCounts, MetricsReport, MetricsRow

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["appliance", "accuracy", "recall", "precision", "f1"]


def _as_binary(seq: Sequence[int], name: str) -> np.ndarray:
    arr = np.asarray(seq)
    if arr.ndim != 1:
        raise RejectedInputError(f"{name} must be a flat state sequence")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise RejectedInputError(f"{name} must hold binary states")
    return arr.astype(bool)


def confusion(pred: Sequence[int], truth: Sequence[int]) -> ConfusionCounts:
    p = _as_binary(pred, "pred")
    t = _as_binary(truth, "truth")
    if p.size != t.size:
        raise RejectedInputError(
            f"length mismatch: pred has {p.size}, truth has {t.size}"
        )
    if p.size == 0:
        raise RejectedInputError("state sequences must not be empty")
    return ConfusionCounts(
        tp=int(np.sum(p & t)),
        tn=int(np.sum(~p & ~t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def _ratio(num: float, den: float) -> float:
    # 0/0 is reported as 0
    return num / den if den else 0.0


def precision_recall_f1(c: ConfusionCounts) -> Tuple[float, float, float]:
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return precision, recall, f1


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise RejectedInputError("accuracy is undefined for all-zero counts")
    return (c.tp + c.tn) / c.total


def metrics_row(name: str, pred: Sequence[int], truth: Sequence[int]) -> MetricsRow:
    c = confusion(pred, truth)
    precision, recall, f1 = precision_recall_f1(c)
    return MetricsRow(
        appliance=name,
        accuracy=accuracy(c),
        recall=recall,
        precision=precision,
        f1=f1,
    )


def macro_average(rows: Iterable[MetricsRow]) -> MetricsRow:
    rows = list(rows)
    if not rows:
        raise RejectedInputError("macro average needs at least one appliance row")
    df = pd.DataFrame([r.model_dump() for r in rows])
    means = df[REPORT_COLUMNS[1:]].mean()
    return MetricsRow(appliance="average", **{k: float(v) for k, v in means.items()})


def metrics_report(
    pred: np.ndarray, truth: np.ndarray, target_ids: List[str]
) -> MetricsReport:
    """Score an N×T prediction matrix against its N×T ground truth."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise RejectedInputError(
            f"prediction shape {pred.shape} does not match truth {truth.shape}"
        )
    if pred.shape[1] != len(target_ids):
        raise RejectedInputError("one column per target id is required")
    rows = [
        metrics_row(tid, pred[:, j], truth[:, j]) for j, tid in enumerate(target_ids)
    ]
    return MetricsReport(rows=rows, average=macro_average(rows))


def report_to_frame(report: MetricsReport) -> pd.DataFrame:
    records = [r.model_dump() for r in report.rows] + [report.average.model_dump()]
    return pd.DataFrame(records, columns=REPORT_COLUMNS)


def write_report_csv(report: MetricsReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report_to_frame(report).to_csv(path, index=False, float_format="%.4f")
    log.info(f"Wrote metrics for {len(report.rows)} targets to {path}")
    return path
