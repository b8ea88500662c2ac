"""Prediction assembly and the evaluation metric suite.

A final load prediction is zero unless the trigger probability exceeds the
threshold, in which case it is the denormalized median quantile projection.
Metrics (F1 on the zero/non-zero classification, RMSE over all hours, RMSE
and MAPE over non-zero hours) are reported pooled over both channels and for
each channel alone; empty non-zero subsets yield absent values, never NaN.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataio import EPSILON_ZERO, Dataset, NormalizationStats, SampleWindow, stack_windows
from .model import ModelOutput

SCOPES = ("overall", "heat_only", "cool_only")
REPORT_CSV_COLUMNS = (
    "model", "scope", "f1_percent", "rmse_nonzero_kwh", "rmse_total_kwh", "mape_nonzero_percent"
)


class StatsMismatchError(RuntimeError):
    """Checkpoint and dataset were normalized with different statistics."""


@dataclass
class PredictionSeries:
    """Aligned per-(step, channel) predictions and actuals in kWh."""

    trigger_prob: np.ndarray    # (n, 2)
    predicted: np.ndarray       # (n, 2), exactly 0 where not triggered
    actual: np.ndarray          # (n, 2)
    triggered: np.ndarray       # (n, 2) bool
    threshold: float


@dataclass
class EvalReport:
    scope: str
    f1_percent: float
    rmse_nonzero_kwh: float | None
    rmse_total_kwh: float
    mape_nonzero_percent: float | None
    tp: int
    fp: int
    fn: int
    tn: int
    n_nonzero: int

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "f1_percent": self.f1_percent,
            "rmse_nonzero_kwh": self.rmse_nonzero_kwh,
            "rmse_total_kwh": self.rmse_total_kwh,
            "mape_nonzero_percent": self.mape_nonzero_percent,
            "counts": {
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "n_nonzero": self.n_nonzero,
            },
        }


def assemble_prediction(
    output: ModelOutput,
    stats: NormalizationStats,
    raw_loads: np.ndarray,
    quantiles: tuple[float, ...],
    threshold: float = 0.5,
) -> PredictionSeries:
    """Combine trigger probabilities and median projections into load predictions.

    `output` may be batched; all (step, channel) pairs are flattened in order.
    """
    if 0.5 not in quantiles:
        raise ValueError("prediction assembly requires the median quantile 0.5")
    median_idx = quantiles.index(0.5)
    probs = output.trigger_probs.detach().cpu().numpy().reshape(-1, 2)
    median = output.quantile_proj.detach().cpu().numpy()[..., median_idx].reshape(-1, 2)
    actual = np.asarray(raw_loads, dtype=np.float64).reshape(-1, 2)
    if probs.shape != actual.shape:
        raise ValueError(f"output shape {probs.shape} does not match targets {actual.shape}")
    denorm = np.stack(
        [stats.denormalize(median[:, 0], "heat"), stats.denormalize(median[:, 1], "cool")], axis=1
    )
    triggered = probs > threshold
    predicted = np.where(triggered, denorm, 0.0)
    return PredictionSeries(
        trigger_prob=probs, predicted=predicted, actual=actual,
        triggered=triggered, threshold=threshold,
    )


def confusion_counts(pred_positive, actual_positive) -> tuple[int, int, int, int]:
    pred = np.asarray(pred_positive, dtype=bool).ravel()
    actual = np.asarray(actual_positive, dtype=bool).ravel()
    if pred.shape != actual.shape:
        raise ValueError("prediction and actual series must have equal length")
    tp = int(np.sum(pred & actual))
    fp = int(np.sum(pred & ~actual))
    fn = int(np.sum(~pred & actual))
    tn = int(np.sum(~pred & ~actual))
    return tp, fp, fn, tn


def f1_score(pred_positive, actual_positive) -> float:
    """F1 in percent; defined as 100 when both series are entirely negative."""
    tp, fp, fn, _ = confusion_counts(pred_positive, actual_positive)
    if tp == 0 and fp == 0 and fn == 0:
        return 100.0
    return 100.0 * 2 * tp / (2 * tp + fp + fn)


def rmse(pred, actual, subset: str = "all", epsilon_zero: float = EPSILON_ZERO) -> float | None:
    """Root-mean-square error in kWh over all hours or non-zero-actual hours only.

    Returns None (absent) when the requested subset is empty.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if subset == "nonzero":
        keep = np.abs(actual) > epsilon_zero
        pred, actual = pred[keep], actual[keep]
    elif subset != "all":
        raise ValueError(f"unknown subset {subset!r}")
    if pred.size == 0:
        return None
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def mape_nonzero(pred, actual, epsilon_zero: float = EPSILON_ZERO) -> float | None:
    """Mean absolute percentage error over hours with |actual| above the zero threshold."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    keep = np.abs(actual) > epsilon_zero
    if not np.any(keep):
        return None
    return float(100.0 * np.mean(np.abs(pred[keep] - actual[keep]) / np.abs(actual[keep])))


def _scope_slices(series: PredictionSeries, scope: str):
    if scope == "overall":
        sel = slice(None)
    elif scope == "heat_only":
        sel = slice(0, 1)
    elif scope == "cool_only":
        sel = slice(1, 2)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return (
        series.predicted[:, sel], series.actual[:, sel], series.triggered[:, sel],
    )


def build_report(series: PredictionSeries, scope: str, epsilon_zero: float = EPSILON_ZERO) -> EvalReport:
    predicted, actual, triggered = _scope_slices(series, scope)
    actual_positive = np.abs(actual) > epsilon_zero
    tp, fp, fn, tn = confusion_counts(triggered, actual_positive)
    return EvalReport(
        scope=scope,
        f1_percent=f1_score(triggered, actual_positive),
        rmse_nonzero_kwh=rmse(predicted, actual, "nonzero", epsilon_zero),
        rmse_total_kwh=rmse(predicted, actual, "all", epsilon_zero),
        mape_nonzero_percent=mape_nonzero(predicted, actual, epsilon_zero),
        tp=tp, fp=fp, fn=fn, tn=tn,
        n_nonzero=int(actual_positive.sum()),
    )


def predict_windows(
    model: torch.nn.Module,
    windows: list[SampleWindow],
    stats: NormalizationStats,
    quantiles: tuple[float, ...],
    threshold: float = 0.5,
    batch_size: int = 256,
) -> PredictionSeries:
    """Eval-mode forward over a window list, assembled into one PredictionSeries."""
    arrays = stack_windows(windows)
    static = torch.from_numpy(arrays["static"]).to(torch.float32)
    weather = torch.from_numpy(arrays["weather"]).to(torch.float32)
    model.eval()
    probs, medians = [], []
    with torch.no_grad():
        for start in range(0, static.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            out = model(static[sl], weather[sl])
            probs.append(out.trigger_probs)
            medians.append(out.quantile_proj)
    merged = ModelOutput(
        trigger_probs=torch.cat(probs), quantile_proj=torch.cat(medians)
    )
    return assemble_prediction(merged, stats, arrays["raw_loads"], quantiles, threshold)


def evaluate_model(
    model: torch.nn.Module,
    windows: list[SampleWindow],
    stats: NormalizationStats,
    quantiles: tuple[float, ...],
    threshold: float = 0.5,
) -> dict[str, EvalReport]:
    """All three scoped reports for one model over one split's windows."""
    series = predict_windows(model, windows, stats, quantiles, threshold)
    return {scope: build_report(series, scope) for scope in SCOPES}


def check_stats_compatible(checkpoint_stats: NormalizationStats, dataset: Dataset) -> None:
    if checkpoint_stats.to_dict() != dataset.stats.to_dict():
        raise StatsMismatchError(
            "checkpoint normalization statistics do not match the dataset; "
            "evaluate against the data the model was trained on"
        )


def write_report_json(path, rows: list[dict]) -> None:
    Path(path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


def write_report_csv(path, rows: list[dict]) -> None:
    """One row per (model, scope); absent metrics serialize as empty cells."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_CSV_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["model"],
                    row["scope"],
                    _fmt(row["f1_percent"]),
                    _fmt(row["rmse_nonzero_kwh"]),
                    _fmt(row["rmse_total_kwh"]),
                    _fmt(row["mape_nonzero_percent"]),
                ]
            )


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def comparison_rows(reports_by_model: dict[str, dict[str, EvalReport]]) -> list[dict]:
    """Flatten {model: {scope: report}} into CSV/JSON-ready rows."""
    rows = []
    for model_kind, scoped in reports_by_model.items():
        for scope in SCOPES:
            report = scoped[scope]
            rows.append(
                {
                    "model": model_kind,
                    "scope": scope,
                    "f1_percent": report.f1_percent,
                    "rmse_nonzero_kwh": report.rmse_nonzero_kwh,
                    "rmse_total_kwh": report.rmse_total_kwh,
                    "mape_nonzero_percent": report.mape_nonzero_percent,
                    "counts": {
                        "tp": report.tp, "fp": report.fp, "fn": report.fn, "tn": report.tn,
                        "n_nonzero": report.n_nonzero,
                    },
                }
            )
    return rows
