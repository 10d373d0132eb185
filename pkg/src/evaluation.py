import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd

from src.config import Config
from src.data import SeriesTable, WindowDataset
from src.errors import ConfigurationError, DimensionError

HEADLINE_STEPS = (3, 6, 12)


@dataclass
class SliceMetrics:
    mae: float
    rmse: float
    mape: Optional[float]  # percent; None when every valid truth is 0
    count: int


@dataclass
class MetricsReport:
    """Per-horizon (1..P) metrics plus their mean; a slice with no valid entries is None."""
    horizons: Dict[int, Optional[SliceMetrics]] = field(default_factory=dict)
    average: Optional[SliceMetrics] = None

    def __getitem__(self, step):
        return self.average if step == 'avg' else self.horizons[step]

    def rows(self):
        for step in sorted(self.horizons):
            yield str(step), self.horizons[step]
        yield 'avg', self.average

    def to_frame(self, period_minutes: float = None) -> pd.DataFrame:
        records = []
        for label, m in self.rows():
            if m is None:
                continue
            lead = ''
            if period_minutes and label != 'avg':
                lead = f"{int(label) * period_minutes:g} min"
            records.append({'horizon': label, 'lead': lead, 'MAE': m.mae, 'RMSE': m.rmse,
                            'MAPE%': np.nan if m.mape is None else m.mape, 'count': m.count})
        return pd.DataFrame.from_records(records, columns=['horizon', 'lead', 'MAE', 'RMSE', 'MAPE%', 'count'])


def _slice_metrics(pred: np.ndarray, truth: np.ndarray, valid: np.ndarray) -> Optional[SliceMetrics]:
    count = int(valid.sum())
    if count == 0:
        return None
    err = (pred - truth)[valid]
    nonzero = valid & (truth != 0)
    mape = None
    if nonzero.any():
        mape = float(np.mean(np.abs(pred[nonzero] - truth[nonzero]) / np.abs(truth[nonzero])) * 100.0)
    return SliceMetrics(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err * err))),
        mape=mape,
        count=count
    )


def compute_metrics(preds, truth, mask=None) -> MetricsReport:
    """
    MAE, RMSE and MAPE per horizon step and averaged over steps.

    Arrays are (Y, P, N[, K]) in speed units, instances first and horizon
    second. MAPE skips entries whose truth is 0.
    """
    preds, truth = np.asarray(preds, dtype=float), np.asarray(truth, dtype=float)
    if preds.shape != truth.shape:
        raise DimensionError(f"Predictions {preds.shape} and truth {truth.shape} differ.")
    if preds.ndim < 3:
        raise DimensionError(f"Expected (instances, horizon, sensors[, features]) arrays, got {preds.shape}.")
    valid = np.ones(preds.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), preds.shape)

    report = MetricsReport()
    for p in range(preds.shape[1]):
        report.horizons[p + 1] = _slice_metrics(preds[:, p], truth[:, p], valid[:, p])

    present = [m for m in report.horizons.values() if m is not None]
    if present:
        mapes = [m.mape for m in present if m.mape is not None]
        report.average = SliceMetrics(
            mae=float(np.mean([m.mae for m in present])),
            rmse=float(np.mean([m.rmse for m in present])),
            mape=float(np.mean(mapes)) if mapes else None,
            count=sum(m.count for m in present)
        )
    return report


def historical_average(train: SeriesTable, query_timestamps, season_period: int = Config.SEASON_PERIOD) -> np.ndarray:
    """
    Seasonal baseline: each (sensor, slot) predicted by the mean of the valid
    training readings in the same slot of the season. Slots never observed
    fall back to the sensor's overall training mean. Returns Q x N.
    """
    if season_period < 1:
        raise ConfigurationError(f"season_period must be >= 1, got {season_period}.")
    period = train.period
    if period is None:
        raise ConfigurationError("The training split needs at least two rows to define its time step.")

    anchor = train.timestamps[0]

    def slots(ts) -> np.ndarray:
        offset = (pd.DatetimeIndex(ts) - anchor) / period
        steps = np.rint(np.asarray(offset, dtype=float)).astype(np.int64)
        return np.mod(steps, season_period)

    readings = pd.DataFrame(np.where(train.mask, train.values, np.nan), columns=list(train.sensor_ids))
    slot_means = readings.groupby(slots(train.timestamps)).mean()
    slot_means = slot_means.reindex(range(season_period))

    unseen = int(slot_means.isna().all(axis=1).sum())
    if unseen:
        logging.warning(f"[EVAL] {unseen} of {season_period} HA slots never observed; using sensor means there")
    slot_means = slot_means.fillna(readings.mean()).fillna(0.0)

    return slot_means.to_numpy()[slots(query_timestamps)]


def ha_window_predictions(train: SeriesTable, dataset: WindowDataset,
                          season_period: int = Config.SEASON_PERIOD) -> np.ndarray:
    """HA forecasts for every window of `dataset`, shaped (Y, P, N, 1)."""
    per_row = historical_average(train, dataset.table.timestamps, season_period)
    L, P = dataset.lookback, dataset.horizon
    rows = np.arange(len(dataset))[:, None] + L + np.arange(P)[None, :]
    return per_row[rows][..., None]


def format_report(report: MetricsReport, title: str, period_minutes: float = None) -> str:
    frame = report.to_frame(period_minutes)
    body = frame.to_string(index=False, float_format=lambda v: f"{v:.4f}") if not frame.empty else "(no valid entries)"
    return f"{title}\n{body}\n"


def report_lines(report: MetricsReport):
    """`horizon,metric,value` lines; absent slices and metrics are left out."""
    lines = ['horizon,metric,value']
    for label, m in report.rows():
        if m is None:
            continue
        lines.append(f"{label},mae,{m.mae:.10g}")
        lines.append(f"{label},rmse,{m.rmse:.10g}")
        if m.mape is not None:
            lines.append(f"{label},mape,{m.mape:.10g}")
        lines.append(f"{label},count,{m.count}")
    return lines


def write_report(report: MetricsReport, out_dir, name: str, title: str, period_minutes: float = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.txt").write_text(format_report(report, title, period_minutes), encoding='utf-8')
    (out_dir / f"{name}.csv").write_text("\n".join(report_lines(report)) + "\n", encoding='utf-8')

    headline = ", ".join(
        f"{step}: MAE {report.horizons[step].mae:.3f}"
        for step in HEADLINE_STEPS if report.horizons.get(step) is not None)
    logging.info(f"[EVAL] {title} -> {out_dir / name}.txt | {headline or 'no headline steps'}")
