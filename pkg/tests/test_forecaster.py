import csv
import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from vqar import forecaster, quantizer
from vqar.data import FeatureConfig, TimeSeries, TimeSeriesDataset, WindowSampler
from vqar.errors import ContractError, DataError, FeatureMismatchError
from vqar.forecaster import ForecastResult, forecast, forecast_batch, perturb_context, quantiles
from vqar.model import ModelConfig, VQARModel


def make_series(n=3, length=40, counts=False, freq_start="2023-02-01", seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        t = np.arange(length)
        level = 5.0 + 3 * i
        if counts:
            target = rng.poisson(level, length).astype(float)
        else:
            target = level * (1 + 0.3 * np.sin(2 * np.pi * t / 7 + i)) + rng.normal(0, 0.1, length)
        out.append(TimeSeries(f"s{i}", pd.Timestamp(freq_start), target, i))
    return out


def make_model(family="gaussian", freq="D", seed=0, identity=True, series=None):
    series = series or make_series(counts=family == "neg_binomial")
    ds = TimeSeriesDataset(series, freq, 6, 12)
    feats = FeatureConfig.for_dataset(ds, use_identity=identity)
    model = VQARModel(ModelConfig(family, 8, 6, 5), feats, seed)
    batch = WindowSampler(ds, feats).sample_batch(np.random.default_rng(seed), 16)
    quantizer.kmeans_init(model.codebook, model.encode_only(batch), 5, np.random.default_rng(seed))
    return model, ds


# --- sampling --------------------------------------------------------------------

def test_sample_matrix_shape_and_start():
    model, ds = make_model()
    r = forecast(model, ds.series[1], 24, 12, num_samples=100, seed=3, series_index=1)
    assert r.samples.shape == (100, 24)
    assert r.start == ds.series[1].start + pd.Timedelta(days=40)
    assert r.nu == pytest.approx(np.abs(ds.series[1].target[-12:].mean()), rel=1e-15)


def test_degenerate_sigma_gives_identical_paths():
    model, ds = make_model()
    model.head.weight.data[:, 1] = 0.0
    model.head.bias.data[1] = np.log(1e-12)  # softplus(b) is 1e-12 to first order
    r = forecast(model, ds.series[0], 10, 12, num_samples=50)
    spread = r.samples.max(axis=0) - r.samples.min(axis=0)
    assert spread.max() < 1e-9 * r.nu


def test_same_seed_is_bitwise_reproducible():
    model, ds = make_model()
    a = forecast_batch(model, ds.series, 6, 12, 20, seed=11)
    b = forecast_batch(model, ds.series, 6, 12, 20, seed=11)
    c = forecast_batch(model, ds.series, 6, 12, 20, seed=12)
    for x, y, z in zip(a, b, c):
        assert np.array_equal(x.samples, y.samples)
        assert not np.array_equal(x.samples, z.samples)


def test_paths_do_not_depend_on_the_number_of_paths():
    model, ds = make_model()
    full = forecast(model, ds.series[2], 8, 12, num_samples=100, seed=5, series_index=2)
    for k in (0, 37, 99):
        one = forecast(model, ds.series[2], 8, 12, num_samples=1, seed=5, series_index=2, first_path=k)
        assert np.array_equal(one.samples[0], full.samples[k])


def test_batching_series_does_not_change_paths():
    model, ds = make_model()
    together = forecast_batch(model, ds.series, 6, 12, 10, seed=2)
    alone = forecast(model, ds.series[1], 6, 12, 10, seed=2, series_index=1)
    assert np.array_equal(together[1].samples, alone.samples)


def test_negbin_samples_are_counts():
    model, ds = make_model("neg_binomial")
    for r in forecast_batch(model, ds.series, 6, 12, 50, seed=1):
        assert (r.samples >= 0).all() and np.array_equal(r.samples, np.round(r.samples))


@pytest.mark.parametrize("c", [0.01, 100.0])
def test_samples_scale_with_the_series(c):
    model, ds = make_model()
    base = forecast_batch(model, ds.series, 6, 12, 30, seed=4)
    scaled = [TimeSeries(s.item_id, s.start, s.target * c, s.static_cat) for s in ds.series]
    other = forecast_batch(model, scaled, 6, 12, 30, seed=4)
    for a, b in zip(base, other):
        assert b.nu == pytest.approx(c * a.nu, rel=1e-12)
        assert np.allclose(b.samples, c * a.samples, rtol=1e-9, atol=0)


def test_covariate_override_and_missing_future_covariates():
    model, ds = make_model(identity=False)
    s = ds.series[0]
    default = forecast(model, s, 6, 12, 5, seed=0)
    feats = forecaster.SeriesFeatures(s, model.features, 12, 6)
    first = len(s) - 12 + feats.pad
    known = feats.known(np.arange(first, first + 18))
    same = forecast(model, s, 6, 12, 5, seed=0, covariates=known)
    assert np.array_equal(default.samples, same.samples)
    with pytest.raises(ContractError):
        forecast(model, s, 6, 12, 5, covariates=known[:15])
    with pytest.raises(ContractError):
        forecast(model, s, 6, 12, 5, covariates=known[:, :2])


def test_invalid_requests():
    model, ds = make_model()
    with pytest.raises(ContractError):
        forecast(model, ds.series[0], 6, 12, num_samples=0)
    with pytest.raises(ContractError):
        forecast(model, ds.series[0], 0, 12)
    stranger = TimeSeries("x", ds.series[0].start, ds.series[0].target, 99)
    with pytest.raises(FeatureMismatchError):
        forecast(model, stranger, 6, 12)
    with pytest.raises(ContractError):
        ForecastResult("x", np.array([[np.nan]]), 1.0, pd.Timestamp("2020-01-01"))


# --- quantiles and perturbation ------------------------------------------------------

def test_quantile_examples():
    s = np.array([[1.0], [2.0], [3.0], [4.0]])
    assert quantiles(s, [0.5])[0, 0] == 2.5
    assert np.array_equal(quantiles(s, [0.0, 1.0])[:, 0], [1.0, 4.0])
    assert np.array_equal(quantiles(np.full((7, 3), 2.5), [0.1, 0.9]), np.full((2, 3), 2.5))
    with pytest.raises(ContractError):
        quantiles(s, [1.5])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.floats(0, 1), min_size=1, max_size=5))
def test_quantiles_are_ordered_and_bounded(seed, levels):
    s = np.random.default_rng(seed).normal(size=(30, 4))
    q = quantiles(s, sorted(levels))
    assert (np.diff(q, axis=0) >= 0).all()
    assert (q >= s.min(axis=0)).all() and (q <= s.max(axis=0)).all()


def test_perturb_context_examples():
    rng = np.random.default_rng(0)
    ctx = rng.normal(size=100_000) * 3 + 7
    assert np.array_equal(perturb_context(ctx, 0.0, rng), ctx)
    flat = np.full(50, 4.0)
    assert np.array_equal(perturb_context(flat, 0.8, rng), flat)
    noisy = perturb_context(ctx, 1.0, rng)
    assert abs(np.std(noisy - ctx) / np.std(ctx) - 1) < 0.02
    with pytest.raises(ContractError):
        perturb_context(ctx, -0.1, rng)


# --- back-testing and outputs -----------------------------------------------------------

def test_split_history_and_noise_free_evaluation_matches():
    model, ds = make_model()
    hist, actual = forecaster.split_history(ds)
    assert all(len(h) == len(s) - 6 for h, s in zip(hist, ds.series))
    assert np.array_equal(actual[0], ds.series[0].target[-6:])
    r0, _, _ = forecaster.forecast_dataset(model, ds, 10, seed=1)
    rn, _, _ = forecaster.forecast_dataset(model, ds, 10, seed=1, noise_level=0.0)
    assert all(np.array_equal(a.samples, b.samples) for a, b in zip(r0, rn))
    rp, _, _ = forecaster.forecast_dataset(model, ds, 10, seed=1, noise_level=0.5)
    assert not np.array_equal(r0[0].samples, rp[0].samples)
    short = TimeSeriesDataset([TimeSeries("a", pd.Timestamp("2020-01-01"), np.ones(6), 0)], "D", 6)
    with pytest.raises(DataError):
        forecaster.split_history(short)


def test_frequency_mismatch_names_both_feature_sets():
    model, _ = make_model(identity=False)
    hourly = TimeSeriesDataset(make_series(), "H", 6, 12)
    with pytest.raises(FeatureMismatchError, match="hour_of_day") as info:
        forecaster.check_compatible(model, hourly)
    assert "day_of_week" in str(info.value)


def test_evaluate_report_and_output_files(tmp_path):
    model, ds = make_model()
    report, results = forecaster.evaluate(model, ds, 20, seed=0)
    assert report.config["seasonality"] == 7 and report.config["noise_level"] == 0.0
    again, _ = forecaster.evaluate(model, ds, 20, seed=0)
    assert report.to_json() == again.to_json()

    forecaster.write_forecasts_jsonl(tmp_path / "f.jsonl", results)
    rows = [json.loads(line) for line in (tmp_path / "f.jsonl").read_text().splitlines()]
    assert np.array_equal(np.array(rows[0]["samples"]), results[0].samples)
    forecaster.write_quantiles_csv(tmp_path / "q.csv", results, [0.1, 0.5, 0.9], "D")
    with open(tmp_path / "q.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 3 * 6 and list(table[0])[-3:] == ["q0.1", "q0.5", "q0.9"]
    assert float(table[0]["q0.5"]) == quantiles(results[0], [0.5])[0, 0]
