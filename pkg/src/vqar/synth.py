"""Deterministic sinusoid suite used for smoke training and the experiment harnesses."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from .data import TimeSeries, TimeSeriesDataset, write_jsonl


def sinusoid_series(num_series: int = 10, length: int = 400, period: float = 7.0,
                    start: str = "2020-01-01") -> list[TimeSeries]:
    """Noiseless weekly sinusoids with per-series level, amplitude and phase."""
    t = np.arange(length)
    out = []
    for i in range(num_series):
        level = 10.0 * (i + 1)
        amp = 0.2 + 0.03 * i
        phase = 2.0 * np.pi * i / num_series
        target = level * (1.0 + amp * np.sin(2.0 * np.pi * t / period + phase))
        out.append(TimeSeries(f"sin_{i}", pd.Timestamp(start), target, i))
    return out


def sinusoid_dataset(num_series: int = 10, length: int = 400, prediction_length: int = 30,
                     context_length: int | None = None, period: float = 7.0):
    """Return (train, test): train drops the last ``prediction_length`` points of each series."""
    full = TimeSeriesDataset(sinusoid_series(num_series, length, period), "D", prediction_length, context_length)
    return full.truncated(prediction_length), full


def write_sinusoid_dataset(directory, **kwargs) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train, test = sinusoid_dataset(**kwargs)
    write_jsonl(directory / "train.jsonl", train.series)
    write_jsonl(directory / "test.jsonl", test.series)
    meta = {"freq": "D", "prediction_length": train.prediction_length, "context_length": train.context_length}
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
    return directory
