"""Frequency-domain attention over the buffered embedding.

The local spectrum of the buffer and a broadcast global spectrum are each
gated by a small network, summed, and mapped back to the time domain using
the local phase.  The last column of the result replaces ``e_t`` at the
emission head.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument
from .spectral import GlobalSpectrum

SCALE_MODES = ("match-rms", "none")


@dataclass(frozen=True)
class SAConfig:
    t_filter: int = 32
    n_fft: Optional[int] = None
    gate_hidden: int = 64
    global_scale_mode: str = "match-rms"

    def __post_init__(self):
        if self.gate_hidden < 1:
            raise InvalidArgument("gate_hidden must be >= 1")
        if self.global_scale_mode not in SCALE_MODES:
            raise InvalidArgument(f"global_scale_mode must be one of {SCALE_MODES}")
        if self.n_fft is not None and self.n_fft < self.t_filter:
            raise InvalidArgument("n_fft must be >= t_filter")

    @property
    def bins(self) -> int:
        return self.t_filter if self.n_fft is None else self.n_fft


@dataclass
class SAOutput:
    f_t: torch.Tensor
    filtered: Optional[torch.Tensor] = None
    attended: Optional[torch.Tensor] = None
    local_spectrum: Optional[torch.Tensor] = None
    alpha_local: Optional[torch.Tensor] = None
    alpha_global: Optional[torch.Tensor] = None


class SpectralGate(nn.Module):
    """Two-layer network mapping ``(e_t, log1p(S[d]))`` to ``n_fft`` sigmoid weights.

    Parameters are shared across embedding dimensions; row ``d`` differs from
    row ``d'`` only through its spectrum.
    """

    def __init__(self, d_embed: int, n_fft: int, hidden: int):
        super().__init__()
        self.d_embed = d_embed
        self.n_fft = n_fft
        self.hidden = nn.Linear(d_embed + n_fft, hidden)
        self.out = nn.Linear(hidden, n_fft)

    def forward(self, e_t: torch.Tensor, spectrum: torch.Tensor) -> torch.Tensor:
        """``e_t`` is ``(..., D)``; ``spectrum`` is ``(..., R, n_fft)`` for any row count ``R``."""
        if e_t.shape[-1] != self.d_embed or spectrum.shape[-1] != self.n_fft:
            raise InvalidArgument(
                f"gate expects e_t (..., {self.d_embed}) and spectrum (..., {self.n_fft}); "
                f"got {tuple(e_t.shape)} and {tuple(spectrum.shape)}"
            )
        # the first layer splits into a per-series key term and a per-row spectrum term
        w = self.hidden.weight
        key = nn.functional.linear(e_t, w[:, : self.d_embed], self.hidden.bias).unsqueeze(-2)
        h = torch.tanh(key + nn.functional.linear(torch.log1p(spectrum), w[:, self.d_embed :]))
        return torch.sigmoid(self.out(h))


def global_magnitude(spectrum: GlobalSpectrum, mode: str = "match-rms") -> np.ndarray:
    """Magnitude row injected for the global term: ``sqrt(psd)``, optionally RMS-matched to the local spectra."""
    mag = np.sqrt(np.maximum(spectrum.psd, 0.0))
    if mode == "none":
        return mag
    if mode != "match-rms":
        raise InvalidArgument(f"unknown global scale mode {mode!r}")
    rms = float(np.sqrt(np.mean(mag**2)))
    if rms == 0.0:
        return mag
    return mag * (spectrum.local_rms / rms)


def local_rms(windows: torch.Tensor) -> float:
    """Batch-average RMS of the local magnitude spectra of ``(..., D, T_F)`` buffers.

    By Parseval the mean squared DFT magnitude of a row equals its energy, so
    no transform is needed.
    """
    energy = windows.detach().pow(2).sum(-1).mean(-1)
    return float(energy.sqrt().mean())


def dft_matrices(t_filter: int, n_fft: int, dtype=torch.float64):
    """Real and imaginary parts of the ``T_F x n_fft`` forward DFT matrix (zero padding implied)."""
    i = torch.arange(t_filter, dtype=torch.float64)[:, None]
    k = torch.arange(n_fft, dtype=torch.float64)[None, :]
    angle = 2 * torch.pi * ((i * k) % n_fft) / n_fft
    return torch.cos(angle).to(dtype), (-torch.sin(angle)).to(dtype)


def _last_column_basis(t_filter: int, n_fft: int, dtype=torch.float64):
    k = torch.arange(n_fft, dtype=torch.float64)
    angle = 2 * torch.pi * ((k * (t_filter - 1)) % n_fft) / n_fft
    return torch.cos(angle).to(dtype), torch.sin(angle).to(dtype)


def _polar(re: torch.Tensor, im: torch.Tensor):
    """Magnitude and unit phasor ``(cos, sin)`` of ``re + j im``; zero bins get phase 0.

    The squared magnitude is floored at the smallest normal float before the
    square root so the gradient stays finite at the origin; the floor is far
    below any representable signal energy.
    """
    sq = re * re + im * im
    mag = torch.sqrt(sq.clamp_min(torch.finfo(sq.dtype).tiny))
    cos = torch.where(sq > 0, re / mag, torch.ones_like(re))
    return mag, cos, im / mag


def real_spectrum(window: torch.Tensor, n_fft: int):
    """Row-wise DFT of ``(..., T_F)`` as ``(re, im)`` computed with real matrix products."""
    c, s = dft_matrices(window.shape[-1], n_fft, window.dtype)
    return window @ c, window @ s


class SpectralAttention(nn.Module):
    def __init__(self, d_embed: int, config: SAConfig):
        super().__init__()
        self.config = config
        self.d_embed = d_embed
        n = config.bins
        self.local_gate = SpectralGate(d_embed, n, config.gate_hidden)
        self.global_gate = SpectralGate(d_embed, n, config.gate_hidden)

    def gates(self, e_t, local_mag, global_row, force_local=False, force_global=False):
        if force_local:
            alpha_l = torch.ones_like(local_mag)
        else:
            alpha_l = self.local_gate(e_t, local_mag)
        if force_global or global_row is None:
            alpha_g = torch.zeros_like(local_mag)
        else:
            row = global_row.to(e_t.dtype).expand(*e_t.shape[:-1], 1, global_row.shape[-1])
            alpha_g = self.global_gate(e_t, row).expand_as(local_mag)
        return alpha_l, alpha_g

    def forward(
        self,
        window: torch.Tensor,
        e_t: torch.Tensor,
        global_row: Optional[torch.Tensor],
        force_local: bool = False,
        force_global: bool = False,
        full: bool = False,
    ) -> SAOutput:
        """Filter buffers ``(..., D, T_F)`` keyed by ``e_t`` ``(..., D)``.

        ``global_row`` is the length-``n_fft`` global magnitude (already
        scaled); ``None`` disables the global term.  With ``full=True`` the
        whole filtered window and all intermediate spectra are returned.
        """
        n = self.config.bins
        if window.shape[-1] != self.config.t_filter or window.shape[-2] != self.d_embed:
            raise InvalidArgument(f"window shape {tuple(window.shape)} does not match (D={self.d_embed}, T_F={self.config.t_filter})")
        if global_row is not None and global_row.shape[-1] != n:
            raise InvalidArgument(f"global spectrum has {global_row.shape[-1]} bins, local has {n}")

        re, im = real_spectrum(window, n)
        polar = _polar(re, im)
        alpha_l, alpha_g = self.gates(e_t, polar[0], global_row, force_local, force_global)
        use_global = not force_global and global_row is not None
        return fuse_and_reconstruct(
            window, global_row if use_global else None, alpha_l, alpha_g, n_fft=n, full=full, spectrum=(re, im), polar=polar
        )


def fuse_and_reconstruct(window, global_row, alpha_local, alpha_global, n_fft=None, full=True, spectrum=None, polar=None) -> SAOutput:
    """Gate local and global magnitudes, reuse the local phase, and invert.

    ``A = L * alpha_local + G * alpha_global`` is placed on the phase of the
    local DFT; ``f_t`` is the newest column of the inverse transform.
    ``global_row=None`` drops the global term.  ``spectrum`` may pass a
    precomputed ``(re, im)`` pair from :func:`real_spectrum` and ``polar`` its
    magnitude/phasor triple.
    """
    t_filter = window.shape[-1]
    n = t_filter if n_fft is None else n_fft
    re, im = real_spectrum(window, n) if spectrum is None else spectrum
    if global_row is not None and global_row.shape[-1] != n:
        raise InvalidArgument(f"global spectrum has {global_row.shape[-1]} bins, local has {n}")
    mag, cos, sin = _polar(re, im) if polar is None else polar

    # L * alpha_l * exp(j phase) == alpha_l * spectrum, so only the global term needs the phasor
    a_re, a_im = alpha_local * re, alpha_local * im
    if global_row is not None:
        g = alpha_global * global_row.to(mag.dtype)
        a_re = a_re + g * cos
        a_im = a_im + g * sin

    if not full:
        # real part of the inverse DFT evaluated at the newest column only
        bc, bs = _last_column_basis(t_filter, n, mag.dtype)
        f_t = (a_re @ bc - a_im @ bs) / n
        return SAOutput(f_t=f_t)

    filtered = torch.fft.ifft(torch.complex(a_re, a_im), dim=-1).real[..., :t_filter]
    magnitude = mag * alpha_local
    if global_row is not None:
        magnitude = magnitude + g
    return SAOutput(
        f_t=filtered[..., -1],
        filtered=filtered,
        attended=magnitude,
        local_spectrum=mag,
        alpha_local=alpha_local,
        alpha_global=alpha_global,
    )
