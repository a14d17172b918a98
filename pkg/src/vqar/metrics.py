"""Forecast accuracy metrics.

Quantile losses and CRPS are normalised by the summed absolute actuals of
the whole evaluation set.  MASE and MSIS are scaled per series by the
in-sample seasonal-naive MAE and then averaged over series.  Undefined
values (zero denominators) come back as NaN and are listed in ``flags``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError

CRPS_QUANTILES = tuple(round(0.1 * k, 1) for k in range(1, 10))
MSIS_ALPHA = 0.05
COLUMNS = ("crps", "ql50", "ql90", "msis", "nrmse", "smape", "mase")


def _pair(actuals, predicted) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(actuals, dtype=np.float64)
    y = np.asarray(predicted, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"actuals {x.shape} and forecast {y.shape} differ in shape")
    return x, y


def _check_level(q: float) -> None:
    if not 0.0 < q < 1.0:
        raise ContractError(f"quantile level must lie in (0, 1), got {q}")


def pinball_sum(actuals, predicted_q, q: float) -> float:
    """Un-normalised ``2 * sum |(xhat - x) * (1{x <= xhat} - q)|``."""
    _check_level(q)
    x, xq = _pair(actuals, predicted_q)
    return float(2.0 * np.sum(np.abs((xq - x) * ((x <= xq) - q))))


def quantile_loss(actuals, predicted_q, q: float) -> float:
    """Weighted pinball loss; NaN when the actuals sum to zero in absolute value."""
    x = np.asarray(actuals, dtype=np.float64)
    denom = float(np.sum(np.abs(x)))
    num = pinball_sum(x, predicted_q, q)
    return num / denom if denom > 0 else math.nan


def sample_quantiles(samples, q_levels: Sequence[float]) -> np.ndarray:
    """Empirical quantiles along the sample axis (axis 0), linear interpolation."""
    return np.quantile(np.asarray(samples, dtype=np.float64), np.asarray(q_levels), axis=0)


def path_mean(samples) -> np.ndarray:
    """Mean over the sample axis, shifted by the first path so identical paths average exactly."""
    s = np.asarray(samples, dtype=np.float64)
    return s[0] + (s - s[0]).mean(axis=0)


def crps_empirical(samples, actuals, q_levels: Sequence[float] = CRPS_QUANTILES) -> float:
    """Mean weighted quantile loss over ``q_levels`` at the sample quantiles.

    ``samples`` has the sample axis first; the remaining axes match ``actuals``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    x = np.asarray(actuals, dtype=np.float64)
    if samples.ndim == x.ndim:
        samples = samples[None]
    if samples.shape[1:] != x.shape or samples.shape[0] < 1:
        raise ContractError(f"samples {samples.shape} do not match actuals {x.shape}")
    qs = sample_quantiles(samples, q_levels)
    return float(np.mean([quantile_loss(x, qs[k], q) for k, q in enumerate(q_levels)]))


def crps_integral(samples, actual: float, grid: int = 20001) -> float:
    """CRPS of the empirical CDF of ``samples`` at ``actual`` by numerical integration.

    Used as an oracle for :func:`crps_empirical`.
    """
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    lo = min(s[0], actual)
    hi = max(s[-1], actual)
    if hi == lo:
        return 0.0
    y = np.linspace(lo, hi, grid)
    F = np.searchsorted(s, y, side="right") / s.size
    H = (y >= actual).astype(np.float64)
    return float(np.trapezoid((F - H) ** 2, y))


ZERO_SCALE_RTOL = 1e-10


def seasonal_error(insample, m: int) -> float:
    """In-sample MAE of the seasonal-naive forecast ``x_t = x_{t-m}``.

    An error below ``ZERO_SCALE_RTOL`` times the mean absolute level is
    rounding noise of an exactly periodic series and is reported as 0.
    """
    x = np.asarray(insample, dtype=np.float64)
    if m < 1:
        raise ContractError(f"seasonality must be >= 1, got {m}")
    if x.size <= m:
        # too short for seasonal differencing: fall back to lag one when possible
        if x.size < 2:
            return math.nan
        m = 1
    err = float(np.mean(np.abs(x[m:] - x[:-m])))
    return 0.0 if err <= ZERO_SCALE_RTOL * float(np.mean(np.abs(x))) else err


def msis(upper, lower, actuals, insample, m: int, alpha: float = MSIS_ALPHA) -> float:
    """Mean scaled interval score of the ``1 - alpha`` interval ``[lower, upper]``."""
    x, u = _pair(actuals, upper)
    _, lo = _pair(actuals, lower)
    if (u < lo).any():
        raise ContractError("interval upper bound below lower bound")
    score = (u - lo) + (2.0 / alpha) * (lo - x) * (x < lo) + (2.0 / alpha) * (x - u) * (x > u)
    denom = seasonal_error(insample, m)
    return float(np.mean(score)) / denom if denom > 0 else math.nan


def nrmse(actuals, mean_forecast) -> float:
    x, y = _pair(actuals, mean_forecast)
    denom = float(np.mean(np.abs(x)))
    return math.sqrt(float(np.mean((x - y) ** 2))) / denom if denom > 0 else math.nan


def smape(actuals, forecast) -> float:
    """Symmetric MAPE; points where both values are zero contribute 0."""
    x, y = _pair(actuals, forecast)
    den = np.abs(x) + np.abs(y)
    ratio = np.divide(np.abs(x - y), den, out=np.zeros_like(den), where=den > 0)
    return float(2.0 * np.mean(ratio))


def mase(actuals, forecast, insample, m: int) -> float:
    x, y = _pair(actuals, forecast)
    denom = seasonal_error(insample, m)
    return float(np.mean(np.abs(x - y))) / denom if denom > 0 else math.nan


def point_metrics(actuals, point_forecast, insample, m: int,
                  mean_forecast=None) -> tuple[float, float, float]:
    """(NRMSE, sMAPE, MASE).  NRMSE uses ``mean_forecast`` when given."""
    mf = point_forecast if mean_forecast is None else mean_forecast
    return nrmse(actuals, mf), smape(actuals, point_forecast), mase(actuals, point_forecast, insample, m)


# ---------------------------------------------------------------------------
# report

@dataclass
class SeriesEvaluation:
    """What one series contributes to a report."""

    item_id: str
    actuals: np.ndarray  # (P,)
    samples: np.ndarray  # (S, P)
    insample: np.ndarray


@dataclass
class EvalReport:
    crps: float
    ql50: float
    ql90: float
    msis: float
    nrmse: float
    smape: float
    mase: float
    per_series: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in COLUMNS}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_nan_to_none(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        vals = {k: (math.nan if d[k] is None else d[k]) for k in COLUMNS}
        return cls(**vals, per_series=d.get("per_series", []), config=d.get("config", {}),
                   flags=d.get("flags", []))

    def table(self) -> str:
        head = " ".join(f"{c.upper():>9}" if c != "smape" else f"{'sMAPE':>9}" for c in COLUMNS)
        row = " ".join(f"{getattr(self, c):9.4f}" for c in COLUMNS)
        return head + "\n" + row


def _nan_to_none(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def _series_row(ev: SeriesEvaluation, m: int) -> dict:
    x = np.asarray(ev.actuals, dtype=np.float64)
    s = np.asarray(ev.samples, dtype=np.float64)
    med = np.median(s, axis=0)
    lo, hi = sample_quantiles(s, [MSIS_ALPHA / 2, 1 - MSIS_ALPHA / 2])
    q50, q90 = sample_quantiles(s, [0.5, 0.9])
    nr, sm, ma = point_metrics(x, med, ev.insample, m, path_mean(s))
    return {
        "item_id": ev.item_id,
        "crps": crps_empirical(s, x),
        "ql50": quantile_loss(x, q50, 0.5),
        "ql90": quantile_loss(x, q90, 0.9),
        "msis": msis(hi, lo, x, ev.insample, m),
        "nrmse": nr,
        "smape": sm,
        "mase": ma,
    }


def evaluate_forecasts(evals: Sequence[SeriesEvaluation], m: int,
                       q_levels: Sequence[float] = CRPS_QUANTILES) -> EvalReport:
    """Aggregate metrics over all series and horizon steps."""
    if not evals:
        raise ContractError("nothing to evaluate")
    X = np.concatenate([np.asarray(e.actuals, dtype=np.float64) for e in evals])
    S = np.concatenate([np.asarray(e.samples, dtype=np.float64) for e in evals], axis=1)
    if S.shape[1] != X.shape[0]:
        raise ContractError("sample paths and actuals differ in length")
    flags = []
    per_series = [_series_row(e, m) for e in evals]

    q50, q90 = sample_quantiles(S, [0.5, 0.9])
    crps = crps_empirical(S, X, q_levels)
    ql50 = quantile_loss(X, q50, 0.5)
    ql90 = quantile_loss(X, q90, 0.9)
    if not math.isfinite(crps):
        flags.append("sum of |actuals| is zero: quantile losses undefined")
    nr = nrmse(X, path_mean(S))
    if not math.isfinite(nr):
        flags.append("mean |actuals| is zero: NRMSE undefined")
    sm = smape(X, np.median(S, axis=0))

    def series_mean(name: str) -> float:
        vals = np.array([r[name] for r in per_series])
        bad = [r["item_id"] for r in per_series if not math.isfinite(r[name])]
        if bad:
            flags.append(f"{name} undefined (zero seasonal error) for series {', '.join(bad)}")
        good = vals[np.isfinite(vals)]
        return float(good.mean()) if good.size else math.nan

    report = EvalReport(crps, ql50, ql90, series_mean("msis"), nr, sm, series_mean("mase"),
                        per_series=per_series, flags=flags)
    report.config = {
        "quantiles": list(q_levels),
        "seasonality": m,
        "msis_alpha": MSIS_ALPHA,
        "normalization": "global sum of |actuals|",
        "point_forecast": "median (sMAPE, MASE), mean (NRMSE)",
        "num_series": len(evals),
        "num_samples": int(S.shape[0]),
    }
    return report
