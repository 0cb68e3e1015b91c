"""Binary classification metrics."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    loss: Optional[float]
    tp: int
    fp: int
    tn: int
    fn: int
    meta: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(pred, labels):
    pred, labels = np.asarray(pred).astype(bool), np.asarray(labels).astype(bool)
    if pred.shape != labels.shape:
        raise ValueError(f"{pred.shape[0] if pred.ndim else 0} predictions for {labels.shape} labels")
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    tn = int(np.sum(~pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return tp, fp, tn, fn


def report_from_counts(tp: int, fp: int, tn: int, fn: int, loss: Optional[float] = None, meta=None) -> MetricsReport:
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total if total else 0.0
    denom = 2 * tp + fp + fn
    if denom == 0:
        log.warning("F1 undefined: no positives predicted or present; reporting 0")
        f1 = 0.0
    else:
        f1 = 2 * tp / denom
    return MetricsReport(float(accuracy), float(f1), loss, tp, fp, tn, fn, dict(meta or {}))


def metrics(pred, labels, loss: Optional[float] = None, meta=None) -> MetricsReport:
    return report_from_counts(*confusion(pred, labels), loss=loss, meta=meta)
