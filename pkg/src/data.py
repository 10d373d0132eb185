import logging
import re
from dataclasses import dataclass
from collections.abc import Sequence
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from src.config import Config
from src.errors import ConfigurationError, IngestionError
from src.graph import SensorGraph

STD_FLOOR = 1e-6


@dataclass
class SeriesTable:
    """T x N speed matrix on a uniform time grid; `mask` is False where a reading is missing."""
    timestamps: pd.DatetimeIndex
    values: np.ndarray
    sensor_ids: Tuple[str, ...]
    mask: np.ndarray

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def period(self) -> Optional[pd.Timedelta]:
        return self.timestamps[1] - self.timestamps[0] if self.T > 1 else None

    def time_of_day(self) -> np.ndarray:
        """Fraction of the day in [0, 1) for every row."""
        return np.asarray((self.timestamps - self.timestamps.normalize()) / pd.Timedelta(days=1), dtype=float)

    def slice(self, start: int, stop: int) -> 'SeriesTable':
        return SeriesTable(self.timestamps[start:stop], self.values[start:stop], self.sensor_ids, self.mask[start:stop])


def load_series(path, missing_value: float = Config.MISSING_VALUE) -> SeriesTable:
    """
    Read a series CSV: ISO-8601 timestamp column, then one column per sensor.
    Readings equal to `missing_value` are flagged missing in the mask.
    """
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+)", str(e))
        raise IngestionError(f"Ragged row: {e}", path=path, line=int(found.group(1)) if found else None) from e
    except pd.errors.EmptyDataError as e:
        raise IngestionError("File is empty.", path=path) from e

    if df.shape[1] < 2:
        raise IngestionError("Need a timestamp column and at least one sensor column.", path=path, line=1)
    if df.empty:
        raise IngestionError("No data rows.", path=path)

    raw = df.iloc[:, 1:]
    missing_fields = raw.isna().any(axis=1).to_numpy()
    if missing_fields.any():
        first = int(np.flatnonzero(missing_fields)[0])
        raise IngestionError(f"Ragged row: expected {df.shape[1]} fields.", path=path, line=first + 2)

    values = raw.apply(lambda col: pd.to_numeric(col.str.strip(), errors='coerce'))
    bad = values.isna().any(axis=1).to_numpy()
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise IngestionError("Non-numeric reading.", path=path, line=first + 2)

    timestamps = pd.to_datetime(df.iloc[:, 0].str.strip(), errors='coerce')
    if timestamps.isna().any():
        first = int(np.flatnonzero(timestamps.isna().to_numpy())[0])
        raise IngestionError("Unparseable timestamp.", path=path, line=first + 2)

    steps = timestamps.diff().iloc[1:].to_numpy()
    if len(steps):
        not_increasing = np.flatnonzero(steps <= np.timedelta64(0))
        if len(not_increasing):
            raise IngestionError("Timestamps must strictly increase.", path=path, line=int(not_increasing[0]) + 3)
        uneven = np.flatnonzero(steps != steps[0])
        if len(uneven):
            raise IngestionError("Timestamps are not uniformly spaced.", path=path, line=int(uneven[0]) + 3)

    arr = values.to_numpy(dtype=float)
    table = SeriesTable(
        timestamps=pd.DatetimeIndex(timestamps),
        values=arr,
        sensor_ids=tuple(str(c).strip() for c in raw.columns),
        mask=arr != missing_value
    )
    logging.info(f"[DATA] Loaded {path}: {table.T} rows x {table.n} sensors | {int((~table.mask).sum())} missing readings")
    return table


def write_series(table: SeriesTable, path) -> None:
    df = pd.DataFrame(table.values, columns=list(table.sensor_ids))
    df.insert(0, 'timestamp', table.timestamps.strftime('%Y-%m-%dT%H:%M:%S'))
    df.to_csv(path, index=False, float_format='%.4f', lineterminator='\n')


@dataclass
class NormStats:
    mean: float
    std: float

    @classmethod
    def fit(cls, table: SeriesTable) -> 'NormStats':
        valid = table.values[table.mask]
        if valid.size == 0:
            raise ConfigurationError("Cannot normalise: the training split has no valid readings.")
        return cls(mean=float(valid.mean()), std=max(float(valid.std()), STD_FLOOR))

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {'mean': self.mean, 'std': self.std}


def split_70_10_20(table: SeriesTable, lookback: int = 1, horizon: int = 1) -> Tuple[SeriesTable, SeriesTable, SeriesTable]:
    """Chronological train/val/test cut at floor(0.7 T) and floor(0.8 T)."""
    a, b = (7 * table.T) // 10, (8 * table.T) // 10
    parts = (table.slice(0, a), table.slice(a, b), table.slice(b, table.T))
    for label, part in zip(('train', 'validation', 'test'), parts):
        if part.T < lookback + horizon:
            raise ConfigurationError(
                f"The {label} split has {part.T} rows; windows of {lookback}+{horizon} need at least {lookback + horizon}.")
    return parts


def build_features(table: SeriesTable, norm: NormStats) -> np.ndarray:
    """T x N x 2: normalized speed (0 where missing) and time-of-day."""
    speed = np.where(table.mask, norm.normalize(table.values), 0.0)
    tod = np.broadcast_to(table.time_of_day()[:, None], speed.shape)
    return np.stack([speed, tod], axis=-1)


@dataclass
class ForecastInstance:
    inputs: np.ndarray         # L x N x K, model scale
    targets: np.ndarray        # P x N x 1, raw speed
    mask: np.ndarray           # P x N x 1
    known_future: np.ndarray   # P x N x (K-1)
    start: int


@dataclass
class WindowBatch:
    inputs: np.ndarray         # B x L x N x K
    targets: np.ndarray        # B x P x N x 1, raw
    targets_norm: np.ndarray   # B x P x N x 1, model scale, 0 where missing
    mask: np.ndarray
    known_future: np.ndarray   # B x P x N x (K-1)
    starts: np.ndarray

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def take(self, rows) -> 'WindowBatch':
        return WindowBatch(self.inputs[rows], self.targets[rows], self.targets_norm[rows], self.mask[rows],
                           self.known_future[rows], self.starts[rows])


class WindowDataset(Sequence):
    """Stride-1 sliding windows over one split, materialized on access."""

    def __init__(self, table: SeriesTable, lookback: int, horizon: int, norm: NormStats):
        if lookback < 1 or horizon < 1:
            raise ConfigurationError(f"Window lengths must be >= 1, got L={lookback}, P={horizon}.")
        self.table = table
        self.lookback = lookback
        self.horizon = horizon
        self.norm = norm
        self.features = build_features(table, norm)
        self.speed = table.values
        self.valid = table.mask

    def __len__(self) -> int:
        return max(self.table.T - self.lookback - self.horizon + 1, 0)

    def __getitem__(self, i: int) -> ForecastInstance:
        if not 0 <= i < len(self):
            raise IndexError(i)
        s, L, P = i, self.lookback, self.horizon
        return ForecastInstance(
            inputs=self.features[s:s + L],
            targets=self.speed[s + L:s + L + P, :, None],
            mask=self.valid[s + L:s + L + P, :, None],
            known_future=self.features[s + L:s + L + P, :, 1:],
            start=s
        )

    @property
    def n(self) -> int:
        return self.table.n

    @property
    def k(self) -> int:
        return self.features.shape[-1]

    def all_targets(self) -> Tuple[np.ndarray, np.ndarray]:
        """Raw targets and their mask for every window, both (Y, P, N, 1)."""
        rows = np.arange(len(self))[:, None] + self.lookback + np.arange(self.horizon)[None, :]
        return self.speed[rows][..., None], self.valid[rows][..., None]

    def batch(self, indices) -> WindowBatch:
        items = [self[int(i)] for i in indices]
        targets = np.stack([it.targets for it in items])
        mask = np.stack([it.mask for it in items])
        return WindowBatch(
            inputs=np.stack([it.inputs for it in items]),
            targets=targets,
            targets_norm=np.where(mask, self.norm.normalize(targets), 0.0),
            mask=mask,
            known_future=np.stack([it.known_future for it in items]),
            starts=np.array([it.start for it in items])
        )


def make_windows(table: SeriesTable, lookback: int, horizon: int, norm: NormStats = None) -> WindowDataset:
    return WindowDataset(table, lookback, horizon, norm or NormStats(0.0, 1.0))


def synth_generate(g: SensorGraph, T: int, seed: int, noise: float, regime_period: Optional[int],
                   rho: float = 0.8, steps_per_day: int = 288, base: float = 60.0, amplitude: float = 10.0,
                   freq: str = '5min', start: str = '2012-03-01') -> SeriesTable:
    """
    Correlated series with switching interactions:

        x_{t+1} = rho * A_t x_t + (1 - rho) * s(t) + noise * eps_t

    A_t is one of two fixed row-normalized weightings of the graph support
    (self-loops included), switching every `regime_period` steps (never when
    None or 0); s(t) is a per-sensor daily sinusoid. rho = 0 with noise = 0
    gives exactly periodic data.
    """
    if T < 1:
        raise ConfigurationError(f"Need T >= 1, got {T}.")
    if not 0.0 <= rho < 1.0:
        raise ConfigurationError(f"rho must lie in [0, 1), got {rho}.")

    rng = np.random.default_rng(seed)
    support = g.out_neighbors.support.mask
    weightings = []
    for _ in range(2):
        w = np.where(support, rng.uniform(0.1, 1.0, size=support.shape), 0.0)
        weightings.append(w / w.sum(axis=1, keepdims=True))
    phase = rng.uniform(0.0, 2 * np.pi, size=g.n)

    def seasonal(t):
        return base + amplitude * np.sin(2 * np.pi * t / steps_per_day + phase)

    values = np.empty((T, g.n))
    x = seasonal(-1)
    for t in range(T):
        values[t] = x
        regime = (t // regime_period) % 2 if regime_period else 0
        x = rho * weightings[regime] @ x + (1.0 - rho) * seasonal(t) + noise * rng.standard_normal(g.n)

    timestamps = pd.date_range(start=start, periods=T, freq=freq)
    logging.info(f"[SYNTH] Generated {T} steps x {g.n} sensors | seed={seed} noise={noise} regime_period={regime_period}")
    return SeriesTable(timestamps=timestamps, values=values, sensor_ids=g.vertex_ids, mask=values != 0.0)
