"""Regression metrics reported per output column on unscaled values."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

PCT_FLOOR = 1e-8
METRIC_FIELDS = ("MAE", "MAPE", "MSE", "RMSE", "RMSPE", "R2")


@dataclass
class MetricsRow:
    output: str
    MAE: float
    MAPE: float
    MSE: float
    RMSE: float
    RMSPE: float
    R2: float
    r2_defined: bool = True

    def as_dict(self) -> dict:
        return asdict(self)


def r2_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    ss_tot = np.sum((y_true - y_true.mean()) ** 2)
    if ss_tot == 0:
        return math.nan
    return float(1.0 - np.sum((y_true - y_pred) ** 2) / ss_tot)


def compute_metrics(y_true, y_pred, output: str = "y") -> MetricsRow:
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.size} targets vs {y_pred.size} predictions")
    if y_true.size < 2:
        raise ValueError("need at least two samples")
    err = y_pred - y_true
    denom = np.maximum(np.abs(y_true), PCT_FLOOR)
    mse = float(np.mean(err**2))
    r2 = r2_score(y_true, y_pred)
    return MetricsRow(
        output=output,
        MAE=float(np.mean(np.abs(err))),
        MAPE=float(100.0 * np.mean(np.abs(err) / denom)),
        MSE=mse,
        RMSE=math.sqrt(mse),
        RMSPE=float(100.0 * np.sqrt(np.mean((err / denom) ** 2))),
        R2=r2,
        r2_defined=not math.isnan(r2),
    )


def metrics_table(Y_true, Y_pred, output_labels) -> list[MetricsRow]:
    Y_true = np.asarray(Y_true, dtype=float).reshape(len(Y_true), -1)
    Y_pred = np.asarray(Y_pred, dtype=float).reshape(len(Y_pred), -1)
    return [compute_metrics(Y_true[:, j], Y_pred[:, j], name) for j, name in enumerate(output_labels)]


def mean_r2(rows: list[MetricsRow]) -> float:
    """Average R2 over outputs, skipping outputs where it is undefined."""
    vals = [r.R2 for r in rows if r.r2_defined]
    return float(np.mean(vals)) if vals else math.nan


def write_metrics_csv(path, rows_by_model: dict[str, list[MetricsRow]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["output", "model", *METRIC_FIELDS])
        for model, rows in rows_by_model.items():
            for r in rows:
                w.writerow([r.output, model] + [repr(float(getattr(r, f))) for f in METRIC_FIELDS])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for f in METRIC_FIELDS:
            r[f] = float(r[f])
    return rows
