from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from spectral_forecast.data import (
    SyntheticSpec,
    TimeSeriesBatch,
    build_covariates,
    generate_synthetic,
    load_csv,
    scale_series,
    training_windows,
    write_csv,
    write_manifest,
)
from spectral_forecast.errors import IngestError, InvalidArgument
from spectral_forecast.metrics import rolling_evaluate


def test_synthetic_reproducible_and_shaped():
    a = generate_synthetic(SyntheticSpec(n_series=20, seed=5))
    b = generate_synthetic(SyntheticSpec(n_series=20, seed=5))
    c = generate_synthetic(SyntheticSpec(n_series=20, seed=6))
    assert np.array_equal(a.batch.targets, b.batch.targets)
    assert not np.array_equal(a.batch.targets, c.batch.targets)
    assert a.batch.targets.shape == (20, 200) and a.batch.n_covariates == 0
    for k, (lo, hi) in enumerate(SyntheticSpec().freq_ranges):
        assert np.all((a.freqs[:, k] >= lo) & (a.freqs[:, k] <= hi))


def test_same_branch_gives_identical_halves():
    spec = SyntheticSpec(n_series=3, sigma_nu=0.0, fixed_freqs=(2, 16, 6, 20), fixed_branches=(1, 1))
    z = generate_synthetic(spec).batch.targets
    np.testing.assert_allclose(z[:, :100], z[:, 100:], atol=1e-12)


def test_reference_waveform_family():
    spec = SyntheticSpec(n_series=4, sigma_nu=0.0, fixed_freqs=(2, 15, 6, 20))
    draw = generate_synthetic(spec)
    t = np.arange(200) / 200
    one = 2 * np.sin(2 * np.pi * 2 * t) + 2 * np.sin(2 * np.pi * 15 * t)
    two = 2 * np.sin(2 * np.pi * 6 * t) + 2 * np.sin(2 * np.pi * 20 * t)
    for i in range(4):
        for h, sl in enumerate((slice(0, 100), slice(100, 200))):
            want = (one, two)[draw.branches[i, h]][sl]
            np.testing.assert_allclose(draw.batch.targets[i, sl], want, atol=1e-12)
    assert np.abs(draw.batch.targets).max() <= 4.0


def test_noiseless_half_energy_at_drawn_frequencies():
    draw = generate_synthetic(SyntheticSpec(n_series=100, sigma_nu=0.0, seed=3))
    f = np.fft.rfftfreq(4096, 1 / 200)
    for i in range(100):
        for h in (0, 1):
            x = draw.clean[i, h * 100 : (h + 1) * 100]
            b = draw.branches[i, h]
            power = np.abs(np.fft.rfft(x * np.hanning(100), n=4096)) ** 2
            near = np.zeros_like(f, dtype=bool)
            for fk in draw.freqs[i, 2 * b : 2 * b + 2]:
                near |= np.abs(f - fk) <= 3.0
            assert power[near].sum() >= 0.95 * power.sum()


@pytest.mark.parametrize("sigma_nu", [0.5, 1.0])
def test_noise_variance(sigma_nu):
    draw = generate_synthetic(SyntheticSpec(n_series=500, sigma_nu=sigma_nu, seed=2))
    resid = draw.batch.targets - draw.clean
    assert resid.size == 100_000
    assert abs(resid.var() / sigma_nu - 1) < 0.05


def test_zero_noise_is_exact():
    draw = generate_synthetic(SyntheticSpec(n_series=5, sigma_nu=0.0))
    assert np.array_equal(draw.batch.targets, draw.clean)


def test_spec_validation():
    with pytest.raises(InvalidArgument):
        SyntheticSpec(length=201)
    with pytest.raises(InvalidArgument):
        SyntheticSpec(freq_ranges=((5, 1), (15, 20), (5, 10), (20, 25)))
    spec = SyntheticSpec(n_series=3, fixed_freqs=(1, 2, 3, 4))
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec


def write_rows(path, rows):
    path.write_text("series_id,timestamp,value\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows))


def test_load_well_formed(tmp_path):
    rows = [("b", "2020-01-01T00:00", 1), ("b", "2020-01-01T01:00", 2), ("b", "2020-01-01T02:00", 3)]
    rows += [("a", "2020-01-01T00:00", 4), ("a", "2020-01-01T01:00", 5), ("a", "2020-01-01T02:00", 6)]
    write_rows(tmp_path / "d.csv", rows)
    batch = load_csv(tmp_path / "d.csv")
    assert batch.labels == ("b", "a")
    np.testing.assert_array_equal(batch.targets, [[1, 2, 3], [4, 5, 6]])
    assert batch.timestamps[1] == pd.Timestamp("2020-01-01T01:00")


def test_load_forward_fills_short_gap(tmp_path):
    rows = [("a", f"2020-01-01T0{h}:00", v) for h, v in [(0, 1), (1, 2), (3, 4)]]
    rows += [("b", f"2020-01-01T0{h}:00", h) for h in range(4)]
    write_rows(tmp_path / "d.csv", rows)
    batch = load_csv(tmp_path / "d.csv", fill_limit=1)
    np.testing.assert_array_equal(batch.targets[0], [1, 2, 2, 4])
    with pytest.raises(IngestError, match="gaps"):
        load_csv(tmp_path / "d.csv", fill_limit=0)


def test_load_errors(tmp_path):
    write_rows(tmp_path / "bad.csv", [("a", "2020-01-01T00:00", 1), ("a", "2020-01-01T01:00", "oops")])
    with pytest.raises(IngestError, match="row 3"):
        load_csv(tmp_path / "bad.csv")
    rows = [("a", "2020-01-01T00:00", 1), ("a", "2020-01-01T01:00", 1), ("a", "2020-01-01T02:00", 1)]
    rows += [("z", "2020-01-01T00:00", 1), ("z", "2020-01-01T01:30", 1), ("z", "2020-01-01T02:00", 1)]
    write_rows(tmp_path / "irr.csv", rows)
    with pytest.raises(IngestError, match="z"):
        load_csv(tmp_path / "irr.csv")
    (tmp_path / "cols.csv").write_text("id,time,v\n1,2,3\n")
    with pytest.raises(IngestError, match="missing columns"):
        load_csv(tmp_path / "cols.csv")
    write_rows(tmp_path / "dup.csv", [("a", "2020-01-01T00:00", 1), ("a", "2020-01-01T00:00", 2)])
    with pytest.raises(IngestError):
        load_csv(tmp_path / "dup.csv")


def test_csv_round_trip(tmp_path):
    batch = generate_synthetic(SyntheticSpec(n_series=7, seed=4)).batch
    write_csv(batch, tmp_path / "a.csv")
    loaded = load_csv(tmp_path / "a.csv")
    np.testing.assert_array_equal(loaded.targets, batch.targets)
    assert loaded.labels == batch.labels
    assert (loaded.timestamps == batch.timestamps).all()
    write_csv(loaded, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    manifest = write_manifest(tmp_path / "m.json", tmp_path / "a.csv", SyntheticSpec(n_series=7, seed=4))
    assert manifest["sigma_nu_variance"] == 0.5 and len(manifest["sha256"]) == 64


def hourly_batch(b=3, t=24 * 21):
    ts = pd.date_range("2021-03-01", periods=t, freq="h")
    z = np.random.default_rng(0).uniform(1, 5, size=(b, t))
    return TimeSeriesBatch(z, np.zeros((b, t, 0)), np.arange(b), np.ones(b), t0=t, tau=0, timestamps=ts)


def test_hourly_covariates():
    batch = build_covariates(hourly_batch(), "hourly", train_end=24 * 14)
    names = batch.feature_names
    assert names == ("hour_of_day", "day_of_week", "week_of_year", "month_of_year", "age", "series_id")
    hour = batch.covariates[0, :, names.index("hour_of_day")]
    np.testing.assert_array_equal(hour[24:], hour[:-24])
    assert len(np.unique(hour[:24])) == 24
    age = batch.covariates[1, :, names.index("age")]
    assert age[0] == 0.0 and age[-1] == 1.0
    np.testing.assert_array_equal(batch.covariates[:, 0, names.index("series_id")], [0, 1, 2])
    train = batch.covariates[0, : 24 * 14]
    for name in ("hour_of_day", "day_of_week", "week_of_year"):
        col = train[:, names.index(name)]
        assert abs(col.mean()) < 1e-10 and abs(col.std() - 1) < 1e-10
    with pytest.raises(InvalidArgument):
        build_covariates(hourly_batch(), "fortnightly")


def test_scale_series_cases():
    z = np.stack([np.zeros(6), np.full(6, -3.0), np.arange(6.0)])
    batch = scale_series(TimeSeriesBatch(z, np.zeros((3, 6, 0)), np.arange(3), np.ones(3), t0=4, tau=2))
    np.testing.assert_allclose(batch.scale, [1.0, 4.0, 2.5])
    np.testing.assert_array_equal(batch.targets[0], 0.0)
    np.testing.assert_allclose(batch.targets[1], -0.75)
    np.testing.assert_allclose(batch.unscaled(), z, rtol=0, atol=1e-12)


def test_batch_validation_and_windows():
    z = np.ones((2, 10))
    with pytest.raises(InvalidArgument):
        TimeSeriesBatch(z, np.zeros((2, 10, 0)), np.arange(2), np.ones(2), t0=5, tau=4)
    bad = z.copy()
    bad[0, 2] = np.nan
    with pytest.raises(InvalidArgument):
        TimeSeriesBatch(bad, np.zeros((2, 10, 0)), np.arange(2), np.ones(2), t0=5, tau=5)
    future_nan = z.copy()
    future_nan[0, 7] = np.nan
    TimeSeriesBatch(future_nan, np.zeros((2, 10, 0)), np.arange(2), np.ones(2), t0=5, tau=5)
    wins = training_windows(TimeSeriesBatch(z, np.zeros((2, 10, 0)), np.arange(2), np.ones(2), t0=10, tau=0), 4, 3)
    assert wins.targets.shape == (6, 4) and wins.t0 == 4


class LastValueModel:
    """Fixed forecaster operating in whatever units it is handed, rescaling by ``batch.scale``."""

    def forecast(self, batch, n_samples=1, seed=0):
        rng = np.random.default_rng(seed)
        scaled = batch.targets[:, batch.t0 - 1]
        draws = scaled[:, None, None] * (1 + 0.1 * rng.normal(size=(batch.n_series, n_samples, batch.tau)))
        return SimpleNamespace(samples=draws * batch.scale[:, None, None])


def test_scaling_pipeline_matches_unscaled_metrics():
    batch = generate_synthetic(SyntheticSpec(n_series=12, seed=8)).batch
    scaled = rolling_evaluate(LastValueModel(), batch, t0=150, tau=50, n_samples=20, scaling=True)
    raw = rolling_evaluate(LastValueModel(), batch, t0=150, tau=50, n_samples=20, scaling=False)
    assert abs(scaled.nd - raw.nd) < 1e-10
    assert abs(scaled.rmse - raw.rmse) < 1e-10
    for r in raw.ql:
        assert abs(scaled.ql[r] - raw.ql[r]) < 1e-10
