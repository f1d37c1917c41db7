"""Deterministic spectral kernels: autocorrelation, Blackman-Tukey PSD and DFTs.

Everything here works on plain numpy arrays and has no hidden state, so the
same inputs always produce bit-identical outputs.  The differentiable
counterparts used inside the network live in :mod:`spectral_forecast.attention`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import InvalidArgument

WINDOWS = ("rectangular", "bartlett", "hann")


@dataclass(frozen=True)
class AutocorrelationEstimate:
    """Biased, truncated autocorrelation.

    ``values`` has shape ``(max_lag + 1,)`` when the embedding dimensions were
    averaged, otherwise ``(D, max_lag + 1)`` with one row per dimension.
    """

    values: np.ndarray
    source_count: int
    dims_averaged: bool
    normalization: str = "biased-truncated"

    @property
    def max_lag(self) -> int:
        return self.values.shape[-1] - 1


@dataclass(frozen=True)
class SpectrumTensor:
    magnitude: np.ndarray
    phase: Optional[np.ndarray]
    n_fft: int

    def to_complex(self) -> np.ndarray:
        if self.phase is None:
            raise InvalidArgument("spectrum has no phase; a PSD alone cannot be inverted")
        return self.magnitude * np.exp(1j * self.phase)


@dataclass(frozen=True)
class GlobalSpectrum:
    """Running estimate of the process-wide power spectrum.

    ``local_rms`` tracks the average RMS of the local magnitude spectra seen
    alongside each update; it is used to bring the global term onto the same
    scale as the local one.
    """

    psd: np.ndarray
    window: str = "bartlett"
    ema_decay: float = 0.9
    update_count: int = 0
    local_rms: float = 1.0

    @classmethod
    def flat(cls, n_fft: int, window: str = "bartlett", ema_decay: float = 0.9) -> "GlobalSpectrum":
        return cls(psd=np.ones(n_fft), window=window, ema_decay=ema_decay)

    @property
    def n_fft(self) -> int:
        return self.psd.shape[0]

    def updated(self, batch_psd: np.ndarray, batch_local_rms: Optional[float] = None) -> "GlobalSpectrum":
        """Fold a batch estimate into the running average.

        The first update replaces the flat prior outright; later updates use
        an exponential moving average with weight ``ema_decay`` on the past.
        """
        batch_psd = np.asarray(batch_psd, dtype=np.float64)
        if batch_psd.shape != self.psd.shape:
            raise InvalidArgument(f"psd shape {batch_psd.shape} != {self.psd.shape}")
        rms = self.local_rms if batch_local_rms is None else float(batch_local_rms)
        if self.update_count == 0:
            psd, local_rms = batch_psd.copy(), rms
        else:
            a = self.ema_decay
            psd = a * self.psd + (1.0 - a) * batch_psd
            local_rms = a * self.local_rms + (1.0 - a) * rms
        return replace(self, psd=psd, local_rms=local_rms, update_count=self.update_count + 1)


def autocorrelation(sequences, max_lag: int, average_dims: bool = True) -> AutocorrelationEstimate:
    """Average autocorrelation of ``M`` sequences shaped ``(M, D, T)``.

    Products that would index past the end of a sequence are dropped while
    the denominator stays ``T`` (the biased estimator), so a constant
    sequence yields ``(T - k) / T`` at lag ``k``.
    """
    x = np.asarray(sequences, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise InvalidArgument(f"expected (M, D, T) sequences, got shape {x.shape}")
    m, d, t = x.shape
    if m == 0 or d == 0 or t == 0:
        raise InvalidArgument("empty batch")
    if not 0 <= max_lag < t:
        raise InvalidArgument(f"max_lag={max_lag} must lie in [0, T={t})")

    per_dim = np.empty((d, max_lag + 1))
    for lag in range(max_lag + 1):
        prod = x[:, :, : t - lag] * x[:, :, lag:]
        per_dim[:, lag] = prod.sum(axis=2).mean(axis=0) / t
    values = per_dim.mean(axis=0) if average_dims else per_dim
    return AutocorrelationEstimate(values=values, source_count=m, dims_averaged=average_dims)


def lag_window(name: str, max_lag: int) -> np.ndarray:
    """Lag window ``w(k)`` for ``k = 0..max_lag`` with ``w(0) = 1``."""
    lags = np.arange(max_lag + 1, dtype=np.float64)
    if name == "rectangular":
        return np.ones_like(lags)
    if name == "bartlett":
        return 1.0 - lags / (max_lag + 1)
    if name == "hann":
        return 0.5 * (1.0 + np.cos(np.pi * lags / (max_lag + 1)))
    raise InvalidArgument(f"unknown window {name!r}; expected one of {WINDOWS}")


def blackman_tukey_psd(acf: AutocorrelationEstimate, window: str = "bartlett", n_fft: Optional[int] = None) -> np.ndarray:
    """Blackman-Tukey PSD of a dimension-averaged autocorrelation.

    The autocorrelation is extended symmetrically to negative lags, tapered
    by the lag window and transformed with ``n_fft`` points.  Lags longer
    than ``n_fft`` wrap around (the DFT sum is evaluated exactly).  Small
    negative values caused by the finite lag window are clamped to zero.
    """
    values = np.asarray(acf.values if isinstance(acf, AutocorrelationEstimate) else acf, dtype=np.float64)
    if values.ndim != 1:
        raise InvalidArgument("blackman_tukey_psd needs a dimension-averaged autocorrelation")
    max_lag = values.shape[0] - 1
    if n_fft is None:
        n_fft = 2 * max_lag + 1
    if n_fft < 1:
        raise InvalidArgument(f"n_fft must be >= 1, got {n_fft}")

    tapered = values * lag_window(window, max_lag)
    circ = np.zeros(n_fft)
    lags = np.arange(max_lag + 1)
    np.add.at(circ, lags % n_fft, tapered)
    np.add.at(circ, (-lags[1:]) % n_fft, tapered[1:])
    psd = np.fft.fft(circ).real
    return np.maximum(psd, 0.0)


def _canonical_phase(spec: np.ndarray) -> np.ndarray:
    phase = np.angle(spec)
    phase[phase <= -np.pi] = np.pi
    phase[spec == 0] = 0.0
    return phase


def forward_dft(signal, n_fft: Optional[int] = None) -> SpectrumTensor:
    """Row-wise DFT over the last axis, zero-padded to ``n_fft``."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim < 1:
        raise InvalidArgument("signal must have at least one axis")
    t = x.shape[-1]
    n_fft = t if n_fft is None else int(n_fft)
    if n_fft < t:
        raise InvalidArgument(f"n_fft={n_fft} shorter than signal length {t}")
    spec = np.fft.fft(x, n=n_fft, axis=-1)
    return SpectrumTensor(magnitude=np.abs(spec), phase=_canonical_phase(spec), n_fft=n_fft)


def inverse_dft(spectrum: SpectrumTensor, out_len: Optional[int] = None) -> np.ndarray:
    """Real part of the inverse DFT of ``magnitude * exp(j * phase)``, truncated to ``out_len``."""
    spec = spectrum.to_complex()
    if spec.shape[-1] != spectrum.n_fft:
        raise InvalidArgument(f"spectrum has {spec.shape[-1]} bins, expected {spectrum.n_fft}")
    out_len = spectrum.n_fft if out_len is None else int(out_len)
    if not 0 < out_len <= spectrum.n_fft:
        raise InvalidArgument(f"out_len={out_len} outside (0, {spectrum.n_fft}]")
    return np.fft.ifft(spec, axis=-1).real[..., :out_len]


def global_psd(embeddings, max_lag: int, n_fft: int, window: str = "bartlett") -> np.ndarray:
    """PSD of ``M`` embedded sequences ``(M, D, T)`` treating every dimension as a realization."""
    acf = autocorrelation(embeddings, max_lag=max_lag, average_dims=True)
    return blackman_tukey_psd(acf, window=window, n_fft=n_fft)
