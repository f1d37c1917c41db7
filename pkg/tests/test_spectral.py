import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_forecast.errors import InvalidArgument
from spectral_forecast.spectral import (
    GlobalSpectrum,
    SpectrumTensor,
    autocorrelation,
    blackman_tukey_psd,
    forward_dft,
    inverse_dft,
    lag_window,
)

from oracles import acf_brute, bt_brute, dft_brute, idft_brute


def test_acf_constant_sequence():
    est = autocorrelation(np.ones((1, 1, 4)), max_lag=2)
    np.testing.assert_allclose(est.values, [1.0, 0.75, 0.5], rtol=0, atol=1e-15)
    assert est.dims_averaged and est.source_count == 1


def test_acf_zero_batch():
    est = autocorrelation(np.zeros((3, 2, 7)), max_lag=4, average_dims=False)
    assert est.values.shape == (2, 5)
    assert not est.values.any()


def test_acf_matches_brute_force_random_batch():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 16))
    for avg in (True, False):
        got = autocorrelation(x, max_lag=10, average_dims=avg).values
        want = np.array(acf_brute(x.tolist(), 10, average_dims=avg))
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_acf_rejects_lag_beyond_length():
    autocorrelation(np.ones((1, 1, 5)), max_lag=4)
    with pytest.raises(InvalidArgument):
        autocorrelation(np.ones((1, 1, 5)), max_lag=5)


def test_acf_rejects_empty_batch():
    with pytest.raises(InvalidArgument):
        autocorrelation(np.zeros((0, 2, 5)), max_lag=1)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_acf_zero_lag_dominates(m, d, t, seed):
    x = np.random.default_rng(seed).normal(size=(m, d, t))
    vals = autocorrelation(x, max_lag=t - 1).values
    assert vals[0] >= 0
    assert np.all(vals[0] >= np.abs(vals) - 1e-12)
    assert vals.shape == (t,)


def test_bt_impulse_is_flat():
    psd = blackman_tukey_psd(autocorrelation(np.array([[[0.0, 0.0, 0.0]]]), 2), n_fft=8)
    assert not psd.any()
    from spectral_forecast.spectral import AutocorrelationEstimate

    acf = AutocorrelationEstimate(values=np.array([1.0, 0.0, 0.0]), source_count=1, dims_averaged=True)
    np.testing.assert_allclose(blackman_tukey_psd(acf, "rectangular", 8), np.ones(8), atol=1e-15)


def test_bt_cosine_peaks_at_bins_2_and_6():
    lags = np.arange(4)
    acf = np.cos(2 * np.pi * lags * 2 / 8)
    psd = blackman_tukey_psd(acf, "rectangular", 8)
    np.testing.assert_allclose(psd, bt_brute(acf.tolist(), 8), atol=1e-12)
    assert set(np.argsort(psd)[-2:]) == {2, 6}


@pytest.mark.parametrize("window", ["rectangular", "bartlett", "hann"])
@pytest.mark.parametrize("n_fft", [4, 7, 16, 33])
def test_bt_matches_direct_sum(window, n_fft):
    rng = np.random.default_rng(n_fft)
    acf = autocorrelation(rng.normal(size=(3, 2, 12)), max_lag=9)
    w = lag_window(window, 9).tolist()
    np.testing.assert_allclose(blackman_tukey_psd(acf, window, n_fft), bt_brute(acf.values.tolist(), n_fft, w), atol=1e-12)


def test_bt_even_symmetry_and_nonnegative():
    rng = np.random.default_rng(3)
    psd = blackman_tukey_psd(autocorrelation(rng.normal(size=(4, 3, 20)), 19), "bartlett", 20)
    assert np.all(psd >= 0)
    np.testing.assert_allclose(psd[1:], psd[1:][::-1], atol=1e-9)


def test_bt_rejects_bad_nfft():
    with pytest.raises(InvalidArgument):
        blackman_tukey_psd(np.ones(3), "bartlett", 0)
    with pytest.raises(InvalidArgument):
        blackman_tukey_psd(np.ones(3), "kaiser", 8)


def test_dft_zero_row():
    spec = forward_dft(np.zeros((2, 8)))
    assert not spec.magnitude.any() and not spec.phase.any()


def test_dft_ones_is_dc_only():
    spec = forward_dft(np.ones((1, 8)), 8)
    np.testing.assert_allclose(spec.magnitude[0], [8, 0, 0, 0, 0, 0, 0, 0], atol=1e-12)


def test_dft_cosine():
    t = np.arange(8)
    row = np.cos(2 * np.pi * 2 * t / 8)
    spec = forward_dft(row[None], 8)
    want = np.abs(dft_brute(row.tolist(), 8))
    np.testing.assert_allclose(spec.magnitude[0], want, atol=1e-12)
    np.testing.assert_allclose(spec.magnitude[0][[2, 6]], [4, 4], atol=1e-12)
    assert np.all(np.delete(spec.magnitude[0], [2, 6]) < 1e-12)


def test_dft_phase_range():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5, 9))
    x[0] = -1.0  # real negative bins land exactly on +/- pi
    spec = forward_dft(x, 12)
    assert np.all(spec.phase > -np.pi) and np.all(spec.phase <= np.pi)
    assert np.all(spec.magnitude >= 0)


def test_dft_rejects_short_nfft():
    with pytest.raises(InvalidArgument):
        forward_dft(np.ones((1, 8)), 4)


def test_round_trip():
    x = np.random.default_rng(1).normal(size=(3, 16))
    back = inverse_dft(forward_dft(x, 16), 16)
    np.testing.assert_allclose(back, x, rtol=1e-9, atol=1e-12)
    padded = inverse_dft(forward_dft(x, 40), 16)
    np.testing.assert_allclose(padded, x, rtol=1e-9, atol=1e-12)


def test_inverse_zero_spectrum():
    spec = SpectrumTensor(np.zeros((2, 8)), np.zeros((2, 8)), 8)
    assert not inverse_dft(spec, 8).any()


def test_inverse_needs_phase():
    with pytest.raises(InvalidArgument):
        inverse_dft(SpectrumTensor(np.ones((1, 8)), None, 8), 8)


def test_doubling_magnitude_doubles_cosine():
    t = np.arange(8)
    row = 1.5 * np.cos(2 * np.pi * t / 8 + 0.3)
    spec = forward_dft(row[None])
    doubled = SpectrumTensor(2 * spec.magnitude, spec.phase, 8)
    want = np.real(idft_brute([2 * complex(v) for v in dft_brute(row.tolist(), 8)]))
    np.testing.assert_allclose(inverse_dft(doubled)[0], want, atol=1e-12)
    np.testing.assert_allclose(inverse_dft(doubled)[0], 2 * row, atol=1e-12)


def test_parseval_and_linearity():
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(2, 4, 10))
    sx = forward_dft(x, 10)
    np.testing.assert_allclose((x**2).sum(-1), (sx.magnitude**2).sum(-1) / 10, rtol=1e-9)
    a, b = 0.7, -2.3
    lhs = forward_dft(a * x + b * y, 10).to_complex()
    rhs = a * sx.to_complex() + b * forward_dft(y, 10).to_complex()
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_purity():
    x = np.random.default_rng(2).normal(size=(2, 3, 12))
    a1 = autocorrelation(x, 6).values
    a2 = autocorrelation(x, 6).values
    assert a1.tobytes() == a2.tobytes()
    assert blackman_tukey_psd(a1, "hann", 12).tobytes() == blackman_tukey_psd(a2, "hann", 12).tobytes()


def test_global_spectrum_ema():
    g = GlobalSpectrum.flat(4, ema_decay=0.0)
    b = np.array([1.0, 2.0, 3.0, 2.0])
    assert np.array_equal(g.updated(b).psd, b)

    g = GlobalSpectrum.flat(4, ema_decay=0.6)
    g = g.updated(b).updated(b)
    np.testing.assert_allclose(g.psd, b, atol=1e-15)
    assert g.update_count == 2

    rng = np.random.default_rng(0)
    batches = rng.random((6, 4))
    g = GlobalSpectrum.flat(4, ema_decay=0.9)
    for bt in batches:
        g = g.updated(bt)
    for k in range(4):
        s = batches[0][k]
        for bt in batches[1:]:
            s = 0.9 * s + 0.1 * bt[k]
        assert abs(g.psd[k] - s) < 1e-12
