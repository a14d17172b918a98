"""Autoregressive sample-path forecasting and back-test evaluation.

For each series the model first runs over the last ``C`` observed points
(teacher forced, exactly as in training) and then rolls forward ``P``
steps.  At each horizon step every path draws a value from the emission
head, and that value is fed back both as the next input and into the lag
covariates.  Each path draws from its own generator seeded by
``(seed, series_index, path_index)``, so a path does not depend on how many
other paths or series are forecast alongside it.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from pandas.tseries.frequencies import to_offset

from . import autograd as ag
from . import heads, metrics
from .data import PANDAS_FREQ, SEASONALITY, FeatureConfig, SeriesFeatures, TimeSeries, TimeSeriesDataset, compute_scale
from .errors import ContractError, DataError, FeatureMismatchError
from .model import VQARModel

DEFAULT_SAMPLES = 100


@dataclass
class ForecastResult:
    item_id: str
    samples: np.ndarray  # (S, P), raw scale
    nu: float
    start: pd.Timestamp  # first horizon timestamp

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ContractError(f"samples must be an S x P matrix with S >= 1, got {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise ContractError(f"non-finite forecast samples for series {self.item_id}")

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def prediction_length(self) -> int:
        return self.samples.shape[1]

    def mean(self) -> np.ndarray:
        return metrics.path_mean(self.samples)

    def median(self) -> np.ndarray:
        return np.median(self.samples, axis=0)

    def to_dict(self, q_levels: Sequence[float] | None = None) -> dict:
        out = {"item_id": self.item_id, "start": str(self.start), "nu": self.nu}
        if q_levels is None:
            out["samples"] = self.samples.tolist()
        else:
            qs = quantiles(self, q_levels)
            out["quantiles"] = {str(q): qs[k].tolist() for k, q in enumerate(q_levels)}
            out["mean"] = self.mean().tolist()
        return out


def quantiles(result: ForecastResult | np.ndarray, q_levels: Sequence[float]) -> np.ndarray:
    """Per-step empirical quantiles (len(q_levels) x P), linear between order statistics."""
    q = np.asarray(q_levels, dtype=np.float64)
    if ((q < 0) | (q > 1)).any():
        raise ContractError(f"quantile levels must lie in [0, 1], got {q_levels}")
    samples = result.samples if isinstance(result, ForecastResult) else np.asarray(result, dtype=np.float64)
    return np.quantile(samples, q, axis=0)


def perturb_context(context, level: float, rng: np.random.Generator) -> np.ndarray:
    """Add iid N(0, (level * std(context))^2) noise to every point of ``context``."""
    if level < 0:
        raise ContractError(f"noise level must be non-negative, got {level}")
    context = np.asarray(context, dtype=np.float64)
    sigma = float(np.std(context))
    if level == 0 or sigma == 0:
        return context.copy()
    return context + rng.normal(0.0, level * sigma, context.shape)


def path_rngs(seed: int, series_index: int, paths: Sequence[int]) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, series_index, int(k)]) for k in paths]


# ---------------------------------------------------------------------------
# inference

def _check_features(model: VQARModel, known: np.ndarray, rows: int) -> None:
    want = len(model.features.time_feature_names) + int(model.features.use_age)
    if known.ndim != 2 or known.shape[1] != want:
        raise ContractError(f"known covariates must have {want} columns, got shape {known.shape}")
    if known.shape[0] < rows:
        raise ContractError(
            f"known covariates cover {known.shape[0]} steps but context plus horizon needs {rows}")


def forecast_batch(model: VQARModel, series: Sequence[TimeSeries], prediction_length: int,
                   context_length: int, num_samples: int = DEFAULT_SAMPLES, seed: int = 0,
                   series_indices: Sequence[int] | None = None, first_path: int = 0,
                   covariates: Sequence[np.ndarray | None] | None = None) -> list[ForecastResult]:
    """Sample ``num_samples`` paths of length ``prediction_length`` for every series.

    ``series`` holds observed history only.  ``covariates`` optionally
    replaces the calendar/age covariates of the last ``context_length``
    points plus the horizon, one ``(C + P, K)`` array per series.
    """
    if num_samples < 1:
        raise ContractError(f"need at least one sample path, got {num_samples}")
    if prediction_length < 1 or context_length < 1:
        raise ContractError("prediction and context lengths must be positive")
    if not series:
        return []
    feats = model.features
    if feats.embedding_dim and any(s.static_cat >= feats.cardinality for s in series):
        raise FeatureMismatchError(
            f"series category exceeds the trained embedding table ({feats.cardinality} entries)")
    C, P, S = context_length, prediction_length, num_samples
    idx = list(range(len(series))) if series_indices is None else list(series_indices)
    lags = np.asarray(feats.lag_indices)
    max_lag = int(lags.max())

    ext, known, nus = [], [], []
    for n, s in enumerate(series):
        if len(s) < 1:
            raise DataError(f"series {s.item_id} has no history")
        f = SeriesFeatures(s, feats, C, P)
        first = len(s) - C + f.pad
        ext.append(f.values[first - max_lag:first + C + P].copy())
        k = f.known(np.arange(first, first + C + P))
        if covariates is not None and covariates[n] is not None:
            k = np.asarray(covariates[n], dtype=np.float64)
            _check_features(model, k, C + P)
            k = k[:C + P]
        known.append(k)
        nus.append(compute_scale(f.values[first:first + C]))
    ext = np.stack(ext)  # (D, max_lag + C + P); horizon columns are zero for now
    known = np.stack(known)
    nu = np.array(nus)
    D = len(series)

    def covs(values: np.ndarray, scale: np.ndarray, t: int, kn: np.ndarray) -> np.ndarray:
        lagged = values[:, max_lag + t - lags] / scale[:, None]
        return np.concatenate([lagged, kn[:, t]], axis=1)

    # row_stable: a path's values must not depend on how many paths or series share the batch
    with ag.no_grad(), ag.row_stable():
        state = model.initial_state(D)
        emb = model.embed(np.array([s.static_cat for s in series]))
        for t in range(1, C):
            x_prev = ext[:, max_lag + t - 1] / nu
            model.step(state, x_prev, covs(ext, nu, t, known), emb)

        # fan out: row n * S + k is path k of series n
        rep = np.repeat(np.arange(D), S)
        state.h_enc = ag.Tensor(state.h_enc.data[rep])
        state.h_dec = ag.Tensor(state.h_dec.data[rep])
        emb_p = None if emb is None else ag.Tensor(emb.data[rep])
        vals = ext[rep]
        nu_p = nu[rep]
        known_p = known[rep]
        streams = [g for n in range(D) for g in path_rngs(seed, idx[n], range(first_path, first_path + S))]
        for t in range(C, C + P):
            x_prev = vals[:, max_lag + t - 1] / nu_p
            p, _ = model.step(state, x_prev, covs(vals, nu_p, t, known_p), emb_p)
            vals[:, max_lag + t] = heads.sample(heads.rescale(p, nu_p), streams)

    horizon = vals[:, max_lag + C:].reshape(D, S, P)
    out = []
    for n, s in enumerate(series):
        start = s.start + len(s) * to_offset(PANDAS_FREQ[feats.freq])
        out.append(ForecastResult(s.item_id, horizon[n], float(nu[n]), start))
    return out


def forecast(model: VQARModel, series: TimeSeries, prediction_length: int, context_length: int,
             num_samples: int = DEFAULT_SAMPLES, seed: int = 0, series_index: int = 0,
             first_path: int = 0, covariates: np.ndarray | None = None) -> ForecastResult:
    """Sample paths for a single series (see :func:`forecast_batch`)."""
    return forecast_batch(model, [series], prediction_length, context_length, num_samples, seed,
                          [series_index], first_path, None if covariates is None else [covariates])[0]


# ---------------------------------------------------------------------------
# back-testing

def split_history(ds: TimeSeriesDataset) -> tuple[list[TimeSeries], list[np.ndarray]]:
    """Cut the last ``prediction_length`` points off every series as the held-out horizon."""
    P = ds.prediction_length
    hist, actual = [], []
    for s in ds.series:
        if len(s) <= P:
            raise DataError(
                f"series {s.item_id} has {len(s)} points; back-testing needs more than {P}")
        hist.append(TimeSeries(s.item_id, s.start, s.target[:-P], s.static_cat))
        actual.append(s.target[-P:])
    return hist, actual


def check_compatible(model: VQARModel, ds: TimeSeriesDataset) -> None:
    """Refuse datasets whose covariate layout differs from the one the model was trained on."""
    have = model.features
    if ds.freq != have.freq:
        offered = FeatureConfig(ds.freq, use_age=have.use_age, use_identity=False)
        raise FeatureMismatchError(
            f"covariates differ: model was trained on {have.freq} data with [{', '.join(have.describe())}] "
            f"but the {ds.freq} dataset provides [{', '.join(offered.describe())}]")


def forecast_dataset(model: VQARModel, ds: TimeSeriesDataset, num_samples: int = DEFAULT_SAMPLES,
                     seed: int = 0, noise_level: float = 0.0, noise_seed: int | None = None,
                     batch_series: int = 64) -> tuple[list[ForecastResult], list[np.ndarray], list[np.ndarray]]:
    """Back-test forecasts of the last ``P`` points of every series.

    With ``noise_level > 0`` the last ``C`` observed points are perturbed
    before inference (calendar covariates are left alone).  Returns
    (forecasts, actuals, in-sample histories).
    """
    check_compatible(model, ds)
    hist, actual = split_history(ds)
    C = ds.context_length
    insample = [h.target for h in hist]
    if noise_level > 0:
        rng = np.random.default_rng([seed if noise_seed is None else noise_seed, 1])
        noisy = []
        for h in hist:
            target = h.target.copy()
            target[-C:] = perturb_context(target[-C:], noise_level, rng)
            noisy.append(TimeSeries(h.item_id, h.start, target, h.static_cat))
        hist = noisy
    results = []
    for lo in range(0, len(hist), batch_series):
        chunk = hist[lo:lo + batch_series]
        results += forecast_batch(model, chunk, ds.prediction_length, C, num_samples, seed,
                                  list(range(lo, lo + len(chunk))))
    return results, actual, insample


def evaluate(model: VQARModel, ds: TimeSeriesDataset, num_samples: int = DEFAULT_SAMPLES, seed: int = 0,
             noise_level: float = 0.0, noise_seed: int | None = None) -> tuple[metrics.EvalReport, list[ForecastResult]]:
    results, actual, insample = forecast_dataset(model, ds, num_samples, seed, noise_level, noise_seed)
    report = evaluate_results(results, actual, insample, SEASONALITY[ds.freq])
    report.config.update({"seed": seed, "noise_level": noise_level,
                          "prediction_length": ds.prediction_length, "context_length": ds.context_length})
    return report, results


def evaluate_results(results: Sequence[ForecastResult], actuals: Sequence[np.ndarray],
                     insample: Sequence[np.ndarray], m: int) -> metrics.EvalReport:
    evals = [metrics.SeriesEvaluation(r.item_id, np.asarray(a, dtype=np.float64), r.samples, np.asarray(h))
             for r, a, h in zip(results, actuals, insample)]
    return metrics.evaluate_forecasts(evals, m)


# ---------------------------------------------------------------------------
# output files

def write_forecasts_jsonl(path, results: Sequence[ForecastResult], q_levels: Sequence[float] | None = None) -> None:
    with Path(path).open("w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(q_levels)) + "\n")


def write_quantiles_csv(path, results: Sequence[ForecastResult], q_levels: Sequence[float],
                        freq: str) -> None:
    """Long-format quantile table (item_id, timestamp, step, mean, q...)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "timestamp", "step", "mean"] + [f"q{q:g}" for q in q_levels])
        for r in results:
            qs = quantiles(r, q_levels)
            stamps = pd.date_range(r.start, periods=r.prediction_length, freq=PANDAS_FREQ[freq])
            mean = r.mean()
            for t in range(r.prediction_length):
                w.writerow([r.item_id, str(stamps[t]), t + 1, repr(float(mean[t]))]
                           + [repr(float(qs[k, t])) for k in range(len(q_levels))])
