"""Gaussian emission head: parameters, log-likelihood and sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidArgument, NumericError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianParams:
    mu: torch.Tensor
    sigma: torch.Tensor


class GaussianHead(nn.Module):
    """``mu = w_mu . f + b_mu`` and ``sigma = softplus(w_sigma . f + b_sigma) + sigma_min``.

    ``hidden > 0`` inserts one tanh layer in front of each projection.
    """

    def __init__(self, d_embed: int, hidden: int = 0, sigma_min: float = 0.0):
        super().__init__()
        self.d_embed = d_embed
        self.sigma_min = sigma_min

        def proj():
            if hidden > 0:
                return nn.Sequential(nn.Linear(d_embed, hidden), nn.Tanh(), nn.Linear(hidden, 1))
            return nn.Linear(d_embed, 1)

        self.mu = proj()
        self.sigma = proj()

    def forward(self, f_t: torch.Tensor) -> GaussianParams:
        if f_t.shape[-1] != self.d_embed:
            raise InvalidArgument(f"expected last dim {self.d_embed}, got {f_t.shape[-1]}")
        if not torch.isfinite(f_t).all():
            raise NumericError("non-finite input to emission head")
        mu = self.mu(f_t).squeeze(-1)
        sigma = F.softplus(self.sigma(f_t).squeeze(-1)) + self.sigma_min
        return GaussianParams(mu, sigma)


def log_likelihood(z, mu, sigma):
    """Gaussian log-density, elementwise over broadcastable tensors."""
    z, mu, sigma = (torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v for v in (z, mu, sigma))
    if (sigma <= 0).any():
        raise InvalidArgument("sigma must be positive")
    u = (z - mu) / sigma
    return -0.5 * LOG_2PI - torch.log(sigma) - 0.5 * u * u


def sample(params: GaussianParams, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    noise = torch.randn(params.mu.shape, generator=generator, dtype=params.mu.dtype, device=params.mu.device)
    return params.mu + params.sigma * noise
