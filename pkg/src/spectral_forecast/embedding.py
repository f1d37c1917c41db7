"""Recurrent embedding ``e_t = f(e_{t-1}, z_{t-1}, x_t)`` and the buffer of recent embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
from torch import nn

from .errors import InvalidArgument

Hidden = Union[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class EmbeddingConfig:
    d_embed: int = 10
    n_layers: int = 3
    t_filter: int = 32
    n_covariates: int = 0
    cell: str = "lstm"
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_embed < 1 or self.n_layers < 1:
            raise InvalidArgument("d_embed and n_layers must be >= 1")
        if self.t_filter < 2:
            raise InvalidArgument("t_filter must be >= 2")
        if self.cell not in ("lstm", "gru"):
            raise InvalidArgument(f"unknown cell {self.cell!r}")

    @property
    def input_dim(self) -> int:
        return 1 + self.n_covariates


@dataclass
class EmbeddingState:
    hidden: Optional[Hidden]
    step_index: int = 0

    def repeat(self, n: int) -> "EmbeddingState":
        """Tile every batch row ``n`` times (row-major), for sampling trajectories."""
        if self.hidden is None:
            return self

        def rep(h):
            return h.repeat_interleave(n, dim=1)

        hidden = tuple(rep(h) for h in self.hidden) if isinstance(self.hidden, tuple) else rep(self.hidden)
        return EmbeddingState(hidden, self.step_index)


class Embedder(nn.Module):
    """Stacked gated recurrent network; ``e_t`` is the top-layer output."""

    def __init__(self, config: EmbeddingConfig):
        super().__init__()
        self.config = config
        rnn = nn.LSTM if config.cell == "lstm" else nn.GRU
        self.rnn = rnn(
            input_size=config.input_dim,
            hidden_size=config.d_embed,
            num_layers=config.n_layers,
            dropout=config.dropout if config.n_layers > 1 else 0.0,
            batch_first=True,
        )

    def forward(self, inputs: torch.Tensor, state: Optional[EmbeddingState] = None):
        """Run over a whole sequence. ``inputs`` is ``(B, T, 1 + C)``."""
        if inputs.shape[-1] != self.config.input_dim:
            raise InvalidArgument(f"input width {inputs.shape[-1]} != {self.config.input_dim}")
        hidden = None if state is None else state.hidden
        out, hidden = self.rnn(inputs, hidden)
        step = 0 if state is None else state.step_index
        return out, EmbeddingState(hidden, step + inputs.shape[1])

    def step(self, state: EmbeddingState, z_prev: torch.Tensor, x_t: Optional[torch.Tensor] = None):
        """One step: previous target ``(B,)`` and covariates ``(B, C)`` to ``e_t`` of shape ``(B, D)``."""
        if x_t is None:
            x_t = z_prev.new_zeros(z_prev.shape[0], 0)
        if x_t.shape[-1] != self.config.n_covariates:
            raise InvalidArgument(f"expected {self.config.n_covariates} covariates, got {x_t.shape[-1]}")
        inp = torch.cat([z_prev.reshape(-1, 1), x_t], dim=-1).unsqueeze(1)
        out, state = self(inp, state)
        return out[:, 0], state


@dataclass
class EmbeddingBuffer:
    """The last ``t_filter`` embeddings, oldest column first, zero-padded during warm-up."""

    window: torch.Tensor
    fill_count: int = 0

    @classmethod
    def empty(cls, batch: int, d_embed: int, t_filter: int, dtype=torch.float64) -> "EmbeddingBuffer":
        return cls(torch.zeros(batch, d_embed, t_filter, dtype=dtype))

    @property
    def t_filter(self) -> int:
        return self.window.shape[-1]

    def push(self, e_t: torch.Tensor) -> "EmbeddingBuffer":
        if e_t.shape != self.window.shape[:-1]:
            raise InvalidArgument(f"embedding shape {tuple(e_t.shape)} != {tuple(self.window.shape[:-1])}")
        window = torch.cat([self.window[..., 1:], e_t.unsqueeze(-1)], dim=-1)
        return EmbeddingBuffer(window, min(self.fill_count + 1, self.t_filter))

    def repeat(self, n: int) -> "EmbeddingBuffer":
        return EmbeddingBuffer(self.window.repeat_interleave(n, dim=0), self.fill_count)


def sliding_windows(embeddings: torch.Tensor, t_filter: int) -> torch.Tensor:
    """All buffers of a sequence at once.

    ``embeddings`` is ``(B, T, D)``; the result is ``(B, T, D, t_filter)`` where
    entry ``[:, t]`` equals the buffer after pushing ``e_0 .. e_t``.
    """
    b, t, d = embeddings.shape
    padded = torch.cat([embeddings.new_zeros(b, t_filter - 1, d), embeddings], dim=1)
    return padded.unfold(1, t_filter, 1)


def buffer_from_history(embeddings: torch.Tensor, t_filter: int) -> EmbeddingBuffer:
    """Buffer holding the tail of ``(B, T, D)`` embeddings, as if pushed one at a time."""
    b, t, d = embeddings.shape
    tail = embeddings[:, -t_filter:].transpose(1, 2)
    window = torch.cat([tail.new_zeros(b, d, t_filter - tail.shape[-1]), tail], dim=-1)
    return EmbeddingBuffer(window, min(t, t_filter))
