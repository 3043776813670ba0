"""Regression and event-classification metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    accuracy: float
    recall: float
    precision: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    n_windows: int

    def to_dict(self) -> dict:
        return asdict(self)


def regression_metrics(pred, truth) -> tuple[float, float]:
    """(MAE, MSE) over every scalar of every window."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise InputError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise InputError("no predictions")
    d = (p - t).ravel()
    return float(np.mean(np.abs(d))), float(np.mean(d * d))


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def classification_metrics(pred_labels, true_labels) -> dict:
    p = np.asarray(pred_labels, dtype=bool).ravel()
    t = np.asarray(true_labels, dtype=bool).ravel()
    if p.shape != t.shape:
        raise InputError(f"length mismatch: {p.size} vs {t.size}")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall else 0.0
    return {"accuracy": _ratio(tp + tn, p.size), "recall": recall, "precision": precision,
            "f1": f1, "tp": tp, "fp": fp, "fn": fn, "tn": tn, "n_windows": int(p.size)}


def evaluate(pred, truth, pred_labels, true_labels) -> MetricsReport:
    mae, mse = regression_metrics(pred, truth)
    return MetricsReport(mae=mae, mse=mse, **classification_metrics(pred_labels, true_labels))


def average_reports(reports: dict[str, MetricsReport]) -> dict:
    """Equal-weight mean of each field across horizon settings."""
    if not reports:
        raise InputError("no reports to average")
    names = [f.name for f in fields(MetricsReport)]
    return {k: float(np.mean([getattr(r, k) for r in reports.values()])) for k in names}


def build_report(per_horizon: dict[str, MetricsReport], meta: dict | None = None) -> dict:
    doc = {"per_horizon": {h: r.to_dict() for h, r in sorted(per_horizon.items())},
           "average": average_reports(per_horizon)}
    if meta:
        doc["meta"] = meta
    return doc
