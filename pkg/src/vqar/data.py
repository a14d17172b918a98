"""Time-series datasets, covariates, mean scaling and training windows.

On disk a dataset is a directory holding ``metadata.json`` and one or more
JSON-lines files with one series per line::

    {"start": "2012-01-01 00:00:00", "target": [...], "item_id": "s1", "feat_static_cat": [0]}

``train.jsonl`` is used for fitting.  ``test.jsonl`` (optional) holds the same
series extended by ``prediction_length`` points for back-testing.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

FREQ_ALIASES = {
    "D": "D", "1D": "D", "daily": "D", "day": "D",
    "H": "H", "1H": "H", "h": "H", "1h": "H", "hourly": "H", "hour": "H",
    "30min": "30min", "30T": "30min", "30t": "30min", "0.5H": "30min",
}
PANDAS_FREQ = {"D": "D", "H": "h", "30min": "30min"}
DEFAULT_LAGS = {"D": (1, 7, 14, 21, 28), "H": (1, 24, 48, 168), "30min": (1, 48, 96, 336)}
TIME_FEATURES = {
    "D": ("day_of_week", "day_of_month", "day_of_year"),
    "H": ("hour_of_day", "day_of_week", "day_of_month", "day_of_year"),
    "30min": ("minute_of_hour", "hour_of_day", "day_of_week", "day_of_month", "day_of_year"),
}
SEASONALITY = {"D": 7, "H": 24, "30min": 48}


def normalize_freq(freq: str) -> str:
    try:
        return FREQ_ALIASES[str(freq)]
    except KeyError:
        raise ConfigError(f"unsupported frequency {freq!r}; supported: 30min, H, D") from None


@dataclass
class TimeSeries:
    item_id: str
    start: pd.Timestamp
    target: np.ndarray
    static_cat: int = 0

    def __len__(self) -> int:
        return len(self.target)


@dataclass
class TimeSeriesDataset:
    series: list[TimeSeries]
    freq: str
    prediction_length: int
    context_length: int | None = None

    def __post_init__(self):
        self.freq = normalize_freq(self.freq)
        if self.prediction_length < 1:
            raise ConfigError(f"prediction_length must be >= 1, got {self.prediction_length}")
        if self.context_length is None:
            self.context_length = 6 * self.prediction_length
        if self.context_length < 1:
            raise ConfigError(f"context_length must be >= 1, got {self.context_length}")

    @property
    def D(self) -> int:
        return len(self.series)

    def __len__(self) -> int:
        return len(self.series)

    def is_count_data(self) -> bool:
        return all(((s.target >= 0) & (np.round(s.target) == s.target)).all() for s in self.series)

    def scaled(self, c: float) -> "TimeSeriesDataset":
        """Copy with every target multiplied by ``c``."""
        return TimeSeriesDataset(
            [TimeSeries(s.item_id, s.start, s.target * c, s.static_cat) for s in self.series],
            self.freq, self.prediction_length, self.context_length)

    def truncated(self, n: int) -> "TimeSeriesDataset":
        """Copy with the last ``n`` points of every series removed."""
        out = []
        for s in self.series:
            if len(s) <= n:
                raise DataError(f"series {s.item_id!r} has {len(s)} points, cannot hold out {n}")
            out.append(TimeSeries(s.item_id, s.start, s.target[:-n], s.static_cat))
        return TimeSeriesDataset(out, self.freq, self.prediction_length, self.context_length)


# ---------------------------------------------------------------------------
# loading and writing

def _parse_line(line: str, lineno: int, path) -> TimeSeries:
    try:
        obj = json.loads(line)
        start = pd.Timestamp(obj["start"])
        target = np.asarray(obj["target"], dtype=np.float64)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}:{lineno}: malformed series record ({exc})") from None
    item_id = str(obj.get("item_id", lineno - 1))
    if target.ndim != 1 or target.size == 0:
        raise DataError(f"{path}:{lineno}: series {item_id!r} needs a non-empty 1-D target")
    if not np.isfinite(target).all():
        raise DataError(f"{path}:{lineno}: series {item_id!r} contains non-finite target values")
    cat = obj.get("feat_static_cat")
    if isinstance(cat, (list, tuple)):
        cat = cat[0] if cat else None
    static_cat = lineno - 1 if cat is None else int(cat)
    return TimeSeries(item_id, start, target, static_cat)


def load_jsonl(path, metadata: dict) -> TimeSeriesDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    if "freq" not in metadata or "prediction_length" not in metadata:
        raise ConfigError("metadata needs 'freq' and 'prediction_length'")
    series = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                series.append(_parse_line(line, lineno, path))
    if not series:
        raise DataError(f"{path}: dataset is empty")
    return TimeSeriesDataset(series, metadata["freq"], int(metadata["prediction_length"]),
                             metadata.get("context_length"))


def read_metadata(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"metadata file {path} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def load_dataset(directory, split: str = "train", metadata_path=None) -> TimeSeriesDataset:
    directory = Path(directory)
    meta = read_metadata(metadata_path or directory / "metadata.json")
    return load_jsonl(directory / f"{split}.jsonl", meta)


def write_jsonl(path, series: Sequence[TimeSeries]) -> None:
    with Path(path).open("w") as fh:
        for s in series:
            fh.write(json.dumps({
                "start": str(s.start),
                "target": [float(v) for v in s.target],
                "item_id": s.item_id,
                "feat_static_cat": [int(s.static_cat)],
            }) + "\n")


# ---------------------------------------------------------------------------
# features

def time_features(timestamps, freq: str) -> np.ndarray:
    """Calendar features scaled to [-0.5, 0.5]; one row per timestamp."""
    freq = normalize_freq(freq)
    single = isinstance(timestamps, (pd.Timestamp, str))
    idx = pd.DatetimeIndex([pd.Timestamp(timestamps)] if single else timestamps)
    cols = {
        "minute_of_hour": idx.minute / 59.0,
        "hour_of_day": idx.hour / 23.0,
        "day_of_week": idx.dayofweek / 6.0,
        "day_of_month": (idx.day - 1) / 30.0,
        "day_of_year": (idx.dayofyear - 1) / 365.0,
    }
    out = np.stack([np.asarray(cols[name], dtype=np.float64) - 0.5 for name in TIME_FEATURES[freq]], axis=-1)
    return out[0] if single else out


def lag_values(target: np.ndarray, t: int, lag_indices: Sequence[int], nu: float = 1.0) -> np.ndarray:
    """``target[t - lag] / nu`` per lag; positions before the series read zero padding."""
    target = np.asarray(target, dtype=np.float64)
    out = np.zeros(len(lag_indices))
    for k, lag in enumerate(lag_indices):
        pos = t - lag
        if 0 <= pos < len(target):
            out[k] = target[pos]
    return out / nu


def compute_scale(context: np.ndarray) -> float:
    """Mean of the context window, or 1 when that mean is exactly zero.

    The magnitude is used so the scale stays positive for series with a
    negative mean.
    """
    context = np.asarray(context, dtype=np.float64)
    if context.size == 0:
        raise DataError("cannot compute a scale from an empty context")
    nu = abs(float(context.mean()))
    return 1.0 if nu == 0.0 else nu


@dataclass
class FeatureConfig:
    freq: str
    lag_indices: tuple[int, ...] = ()
    use_age: bool = True
    embedding_dim: int = 0
    use_identity: bool = True
    cardinality: int = 1

    def __post_init__(self):
        self.freq = normalize_freq(self.freq)
        if not self.lag_indices:
            self.lag_indices = DEFAULT_LAGS[self.freq]
        self.lag_indices = tuple(sorted(int(l) for l in self.lag_indices))
        if any(l < 1 for l in self.lag_indices):
            raise ConfigError("lag indices must be positive integers")
        if not self.use_identity:
            self.embedding_dim = 0

    @classmethod
    def for_dataset(cls, ds: TimeSeriesDataset, use_identity: bool = True, use_age: bool = True,
                    lag_indices: Sequence[int] = ()) -> "FeatureConfig":
        cardinality = max(s.static_cat for s in ds.series) + 1
        dim = min(16, math.ceil(ds.D / 2)) if use_identity else 0
        return cls(ds.freq, tuple(lag_indices), use_age, dim, use_identity, cardinality)

    @property
    def time_feature_names(self) -> tuple[str, ...]:
        return TIME_FEATURES[self.freq]

    @property
    def static_dim(self) -> int:
        """Covariates assembled from data (everything except the trainable embedding)."""
        return len(self.lag_indices) + len(self.time_feature_names) + int(self.use_age)

    @property
    def num_features(self) -> int:
        return self.static_dim + self.embedding_dim

    def describe(self) -> list[str]:
        names = [f"lag_{l}" for l in self.lag_indices] + list(self.time_feature_names)
        if self.use_age:
            names.append("age")
        names += [f"embedding_{k}" for k in range(self.embedding_dim)]
        return names

    def to_dict(self) -> dict:
        return {"freq": self.freq, "lag_indices": list(self.lag_indices), "use_age": self.use_age,
                "embedding_dim": self.embedding_dim, "use_identity": self.use_identity,
                "cardinality": self.cardinality}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(d["freq"], tuple(d["lag_indices"]), d["use_age"], d["embedding_dim"],
                   d["use_identity"], d["cardinality"])


class SeriesFeatures:
    """Precomputed covariates of one series over padded history plus ``horizon`` future steps.

    Positions are series offsets ``p``; array row is ``p + pad``.
    """

    def __init__(self, series: TimeSeries, cfg: FeatureConfig, window: int, horizon: int = 0):
        T = len(series)
        self.length = T
        self.pad = max(window - T, 0) + max(cfg.lag_indices)
        n = self.pad + T + horizon
        self.values = np.zeros(n)
        self.values[self.pad:self.pad + T] = series.target
        offsets = np.arange(-self.pad, T + horizon)
        stamps = pd.date_range(series.start, periods=T + horizon, freq=PANDAS_FREQ[cfg.freq])
        if self.pad:
            before = pd.date_range(end=series.start, periods=self.pad + 1, freq=PANDAS_FREQ[cfg.freq])[:-1]
            stamps = before.append(stamps)
        self.timestamps = stamps
        self.time = time_features(stamps, cfg.freq)
        self.age = np.log(2.0 + np.maximum(offsets, 0)) / np.log(2.0 + T)
        self.cfg = cfg
        self.static_cat = series.static_cat

    def lagged(self, rows: np.ndarray) -> np.ndarray:
        """Raw lagged values for the given array rows (zeros before the padded start)."""
        lags = np.asarray(self.cfg.lag_indices)
        src = rows[:, None] - lags[None, :]
        return np.where(src >= 0, self.values[np.clip(src, 0, None)], 0.0)

    def known(self, rows: np.ndarray) -> np.ndarray:
        """Calendar and age covariates for the given array rows."""
        parts = [self.time[rows]]
        if self.cfg.use_age:
            parts.append(self.age[rows][:, None])
        return np.concatenate(parts, axis=1)


@dataclass
class TrainingWindow:
    scaled_target: np.ndarray
    raw_target: np.ndarray
    covariates: np.ndarray
    nu: float
    item_index: int
    series_index: int
    start: int

    def __len__(self) -> int:
        return len(self.scaled_target)


@dataclass
class Batch:
    scaled_target: np.ndarray  # (B, L)
    raw_target: np.ndarray  # (B, L)
    covariates: np.ndarray  # (B, L, F_static)
    nu: np.ndarray  # (B,)
    item_index: np.ndarray  # (B,)
    series_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def from_windows(cls, windows: Sequence[TrainingWindow]) -> "Batch":
        if not windows:
            raise DataError("cannot build an empty batch")
        return cls(
            np.stack([w.scaled_target for w in windows]),
            np.stack([w.raw_target for w in windows]),
            np.stack([w.covariates for w in windows]),
            np.array([w.nu for w in windows]),
            np.array([w.item_index for w in windows], dtype=np.int64),
            np.array([w.series_index for w in windows], dtype=np.int64),
        )

    def __len__(self) -> int:
        return self.scaled_target.shape[0]


class WindowSampler:
    """Uniform series choice, then a uniform window start within that series."""

    def __init__(self, ds: TimeSeriesDataset, cfg: FeatureConfig):
        if ds.D == 0:
            raise DataError("dataset has no series")
        self.ds = ds
        self.cfg = cfg
        self.C = ds.context_length
        self.P = ds.prediction_length
        self.L = self.C + self.P
        self.features = [SeriesFeatures(s, cfg, self.L) for s in ds.series]

    def num_starts(self, i: int) -> int:
        return max(len(self.ds.series[i]) - self.L, 0) + 1

    def usable_positions(self) -> int:
        return int(sum(max(len(s), self.L) for s in self.ds.series))

    def window(self, i: int, start: int) -> TrainingWindow:
        """Window whose first point is series offset ``start`` (negative inside padding)."""
        f = self.features[i]
        rows = np.arange(start, start + self.L) + f.pad
        raw = f.values[rows]
        nu = compute_scale(raw[:self.C])
        cov = np.concatenate([f.lagged(rows) / nu, f.known(rows)], axis=1)
        return TrainingWindow(raw / nu, raw, cov, nu, f.static_cat, i, start)

    def sample(self, rng: np.random.Generator) -> TrainingWindow:
        i = int(rng.integers(self.ds.D))
        T = len(self.ds.series[i])
        start = T - self.L if T < self.L else int(rng.integers(self.num_starts(i)))
        return self.window(i, start)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> Batch:
        return Batch.from_windows([self.sample(rng) for _ in range(batch_size)])


def sample_window(ds: TimeSeriesDataset, cfg: FeatureConfig, rng: np.random.Generator) -> TrainingWindow:
    return WindowSampler(ds, cfg).sample(rng)
