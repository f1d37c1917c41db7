"""The forecaster: embedding, optional spectral attention, Gaussian head; training and sampling."""
from __future__ import annotations

import copy
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .attention import SAConfig, SpectralAttention, global_magnitude, local_rms
from .data import TimeSeriesBatch
from .embedding import Embedder, EmbeddingConfig, EmbeddingState, buffer_from_history, sliding_windows
from .errors import InvalidArgument, NumericError, TrainingDiverged, VersionMismatch
from .head import GaussianHead, GaussianParams, log_likelihood, sample
from .spectral import GlobalSpectrum, global_psd

log = logging.getLogger(__name__)

QUANTILES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class ModelConfig:
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    sa: SAConfig = field(default_factory=SAConfig)
    use_sa: bool = True
    ablate_local: bool = False
    ablate_global: bool = False
    head_hidden: int = 0
    sigma_min: float = 1e-3
    psd_window: str = "bartlett"
    ema_decay: float = 0.9
    n_samples: int = 200
    dtype: str = "float32"

    def __post_init__(self):
        if self.embedding.t_filter != self.sa.t_filter:
            raise InvalidArgument("embedding and attention must share t_filter")
        if (self.ablate_local or self.ablate_global) and not self.use_sa:
            raise InvalidArgument("ablation flags require use_sa")
        if self.n_samples < 1:
            raise InvalidArgument("n_samples must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgument("dtype must be float32 or float64")

    @classmethod
    def build(cls, d_embed=10, n_layers=3, t_filter=32, n_covariates=0, n_fft=None, gate_hidden=64, cell="lstm", **kw):
        emb = EmbeddingConfig(d_embed=d_embed, n_layers=n_layers, t_filter=t_filter, n_covariates=n_covariates, cell=cell)
        sa = SAConfig(t_filter=t_filter, n_fft=n_fft, gate_hidden=gate_hidden, global_scale_mode=kw.pop("global_scale_mode", "match-rms"))
        return cls(embedding=emb, sa=sa, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["embedding"] = EmbeddingConfig(**d["embedding"])
        d["sa"] = SAConfig(**d["sa"])
        return cls(**d)

    @property
    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64


@dataclass
class ForecastResult:
    """Sample paths ``(B, S, tau)`` in original units with per-step summaries."""

    samples: np.ndarray
    quantiles: Dict[float, np.ndarray]
    mean: np.ndarray
    series_ids: np.ndarray

    @property
    def median(self) -> np.ndarray:
        return self.quantiles[0.5]


@dataclass
class TeacherForcedOutput:
    nll: torch.Tensor
    params: GaussianParams
    embeddings: torch.Tensor
    step_nll: torch.Tensor


class SpectralForecaster(nn.Module):
    """Autoregressive Gaussian forecaster with optional spectral attention.

    With ``use_sa=False`` the head reads ``e_t`` directly (the base model).
    The global spectrum is a running statistic, not a parameter: it lives in
    :attr:`global_spectrum` and receives no gradient.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embedding.d_embed
        self.embedder = Embedder(config.embedding)
        self.attention = SpectralAttention(d, config.sa) if config.use_sa else None
        self.head = GaussianHead(d, hidden=config.head_hidden, sigma_min=config.sigma_min)
        self.global_spectrum = GlobalSpectrum.flat(config.sa.bins, window=config.psd_window, ema_decay=config.ema_decay)
        self.to(config.torch_dtype)

    @property
    def dtype(self):
        return self.config.torch_dtype

    def with_flags(self, **flags) -> "SpectralForecaster":
        """Shallow view sharing parameters but with different ablation flags."""
        view = copy.copy(self)
        object.__setattr__(view, "config", replace(self.config, **flags))
        return view

    # ---- building blocks -------------------------------------------------

    def _tensors(self, batch: TimeSeriesBatch):
        z = torch.as_tensor(batch.targets, dtype=self.dtype)
        x = torch.as_tensor(batch.covariates, dtype=self.dtype)
        if x.shape[-1] != self.config.embedding.n_covariates:
            raise InvalidArgument(f"batch has {x.shape[-1]} covariates, model expects {self.config.embedding.n_covariates}")
        return z, x

    def global_row(self) -> Optional[torch.Tensor]:
        if self.attention is None or self.config.ablate_global:
            return None
        mag = global_magnitude(self.global_spectrum, self.config.sa.global_scale_mode)
        return torch.as_tensor(mag, dtype=self.dtype)

    def filter(self, window, e_t, full: bool = False):
        """Apply the attention block (or pass ``e_t`` through for the base model)."""
        if self.attention is None:
            return None
        return self.attention(
            window,
            e_t,
            self.global_row(),
            force_local=self.config.ablate_local,
            force_global=self.config.ablate_global,
            full=full,
        )

    # ---- teacher forcing -------------------------------------------------

    def teacher_forced_pass(self, batch: TimeSeriesBatch, upto: Optional[int] = None) -> TeacherForcedOutput:
        """Mean negative log-likelihood over columns ``1 .. upto - 1`` with observed inputs.

        ``upto`` defaults to the batch's ``t0``.  Column 0 has no previous
        observation and is not scored.
        """
        z, x = self._tensors(batch)
        upto = batch.t0 if upto is None else upto
        if upto < 2:
            raise InvalidArgument("need at least two observed columns")
        z, x = z[:, :upto], x[:, :upto]
        z_prev = torch.cat([z.new_zeros(z.shape[0], 1), z[:, :-1]], dim=1)
        emb, _ = self.embedder(torch.cat([z_prev.unsqueeze(-1), x], dim=-1))
        if self.attention is None:
            feats = emb
        else:
            windows = sliding_windows(emb, self.config.sa.t_filter)
            feats = self.filter(windows, emb).f_t
        params = self.head(feats)
        step_nll = -log_likelihood(z[:, 1:], params.mu[:, 1:], params.sigma[:, 1:])
        nll = step_nll.mean()
        if not torch.isfinite(nll):
            bad = (~torch.isfinite(step_nll)).nonzero()
            raise NumericError(f"non-finite loss; first bad (series, step) = {bad[:5].tolist()}")
        return TeacherForcedOutput(nll=nll, params=params, embeddings=emb, step_nll=step_nll)

    @torch.no_grad()
    def update_global_spectrum(self, embeddings: torch.Tensor) -> GlobalSpectrum:
        """Fold the PSD of a batch of embedded sequences ``(M, T, D)`` into the running estimate."""
        if self.attention is None:
            return self.global_spectrum
        emb = embeddings.detach().to(torch.float64)
        t_filter, n = self.config.sa.t_filter, self.config.sa.bins
        max_lag = min(t_filter - 1, emb.shape[1] - 1)
        psd = global_psd(emb.transpose(1, 2).numpy(), max_lag=max_lag, n_fft=n, window=self.config.psd_window)
        rms = local_rms(sliding_windows(emb, t_filter)[:, t_filter - 1 :])
        self.global_spectrum = self.global_spectrum.updated(psd, rms)
        return self.global_spectrum

    # ---- sampling --------------------------------------------------------

    @torch.no_grad()
    def forecast(
        self,
        batch: TimeSeriesBatch,
        n_samples: Optional[int] = None,
        seed: int = 0,
        chunk_rows: int = 8192,
        sigma_scale: float = 1.0,
    ) -> ForecastResult:
        """Condition on ``[0, t0)`` and draw ``n_samples`` trajectories over ``[t0, t0 + tau)``.

        Future targets are never read.  Series are processed in chunks of at
        most ``chunk_rows`` trajectories; the draw sequence depends only on
        ``seed``, the batch and ``chunk_rows``.
        """
        n_samples = self.config.n_samples if n_samples is None else n_samples
        b, t0, tau = batch.n_series, batch.t0, batch.tau
        if t0 < 1:
            raise InvalidArgument("need at least one conditioning column")
        gen = torch.Generator().manual_seed(seed)
        per_chunk = max(1, chunk_rows // n_samples)
        out = np.zeros((b, n_samples, tau))
        if tau > 0:
            for lo in range(0, b, per_chunk):
                idx = np.arange(lo, min(b, lo + per_chunk))
                out[idx] = self._sample_paths(batch.subset(idx), n_samples, gen, sigma_scale)
        out *= batch.scale[:, None, None]
        quantiles = {q: np.quantile(out, q, axis=1) for q in QUANTILES} if tau else {q: out[:, 0] for q in QUANTILES}
        return ForecastResult(samples=out, quantiles=quantiles, mean=out.mean(axis=1), series_ids=batch.series_ids)

    def _condition(self, z, x, t0):
        z_prev = torch.cat([z.new_zeros(z.shape[0], 1), z[:, : t0 - 1]], dim=1)
        emb, state = self.embedder(torch.cat([z_prev.unsqueeze(-1), x[:, :t0]], dim=-1))
        return emb, state

    def _sample_paths(self, batch: TimeSeriesBatch, n_samples: int, gen, sigma_scale: float) -> np.ndarray:
        z, x = self._tensors(batch)
        t0, tau = batch.t0, batch.tau
        z = z[:, :t0]  # no access to the forecast range
        emb, state = self._condition(z, x, t0)
        state = state.repeat(n_samples)
        buf = buffer_from_history(emb, self.config.sa.t_filter).repeat(n_samples)
        x_rep = x.repeat_interleave(n_samples, dim=0)
        z_prev = z[:, t0 - 1].repeat_interleave(n_samples)
        draws = []
        for t in range(t0, t0 + tau):
            e_t, state = self.embedder.step(state, z_prev, x_rep[:, t])
            if self.attention is None:
                f_t = e_t
            else:
                buf = buf.push(e_t)
                f_t = self.filter(buf.window, e_t).f_t
            params = self.head(f_t)
            params = GaussianParams(params.mu, params.sigma * sigma_scale)
            z_prev = sample(params, gen)
            draws.append(z_prev)
        return torch.stack(draws, dim=1).reshape(batch.n_series, n_samples, tau).to(torch.float64).numpy()

    @torch.no_grad()
    def trace(self, batch: TimeSeriesBatch, seed: int = 0) -> Dict[str, np.ndarray]:
        """Step-by-step internals for one sample path per series, for interpretability dumps.

        Returns ``embedding`` (B, T, D) plus, when attention is enabled,
        ``window``/``filtered`` (B, T, D, T_F) and ``alpha_local``/
        ``alpha_global``/``attended`` (B, T, D, N_FT), and the sampled ``path``.
        """
        z, x = self._tensors(batch)
        gen = torch.Generator().manual_seed(seed)
        t_filter = self.config.sa.t_filter
        state = EmbeddingState(None)
        buf = buffer_from_history(z.new_zeros(batch.n_series, 0, self.config.embedding.d_embed), t_filter)
        rec: Dict[str, List[torch.Tensor]] = {k: [] for k in ("embedding", "window", "filtered", "alpha_local", "alpha_global", "attended", "mu", "sigma", "path")}
        z_prev = z.new_zeros(batch.n_series)
        for t in range(batch.length):
            e_t, state = self.embedder.step(state, z_prev, x[:, t])
            buf = buf.push(e_t)
            rec["embedding"].append(e_t)
            if self.attention is None:
                f_t = e_t
            else:
                out = self.filter(buf.window, e_t, full=True)
                f_t = out.f_t
                rec["window"].append(buf.window)
                rec["filtered"].append(out.filtered)
                rec["alpha_local"].append(out.alpha_local)
                rec["alpha_global"].append(out.alpha_global)
                rec["attended"].append(out.attended)
            params = self.head(f_t)
            rec["mu"].append(params.mu)
            rec["sigma"].append(params.sigma)
            drawn = sample(params, gen)
            rec["path"].append(drawn)
            z_prev = z[:, t] if t < batch.t0 else drawn
        result = {k: torch.stack(v, dim=1).to(torch.float64).numpy() for k, v in rec.items() if v}
        result["scale"] = batch.scale
        result["targets"] = batch.unscaled()
        result["t0"] = np.array(batch.t0)
        return result


# ---- training ----------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    clip_norm: float = 10.0
    seed: int = 0
    max_steps: Optional[int] = None
    val_samples: int = 100
    val_seed: int = 12345
    val_every: int = 1
    scaling: bool = True


@dataclass
class TrainState:
    model: SpectralForecaster
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    history: List[dict] = field(default_factory=list)
    best_val_nd: Optional[float] = None
    best_epoch: Optional[int] = None

    @property
    def global_spectrum(self) -> GlobalSpectrum:
        return self.model.global_spectrum


def init_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    torch.manual_seed(train_config.seed)
    model = SpectralForecaster(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    return TrainState(model=model, optimizer=opt, config=train_config)


def validation_nd(model: SpectralForecaster, val: TimeSeriesBatch, n_samples: int, seed: int, scaling: bool = True) -> float:
    from .metrics import rolling_evaluate

    return rolling_evaluate(model, val, t0=val.t0, tau=val.tau, n_samples=n_samples, seed=seed, scaling=scaling).nd


def train(
    state: TrainState,
    train_data: TimeSeriesBatch,
    val_data: Optional[TimeSeriesBatch] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Minibatch maximum likelihood with Adam and gradient clipping.

    ``train_data`` rows are fully observed windows.  After each step the
    embeddings of the batch just scored update the global spectrum, so every
    batch is scored with spectral statistics from other series.  The model
    is left at the epoch with the lowest validation ND (or the last epoch
    when ``val_data`` is ``None``).  ``val_data`` holds whole evaluation
    windows split at their ``t0``.
    """
    from .data import scale_series

    cfg = state.config
    model, opt = state.model, state.optimizer
    gen = torch.Generator().manual_seed(cfg.seed)
    data = scale_series(train_data) if cfg.scaling else train_data
    n = data.n_series
    best_state = None
    initial_nll = None
    bad_epochs = 0

    def budget_left():
        return cfg.max_steps is None or state.step < cfg.max_steps

    while state.epoch < cfg.epochs and budget_left():
        model.train()
        perm = torch.randperm(n, generator=gen).numpy()
        losses = []
        for lo in range(0, n, cfg.batch_size):
            if not budget_left():
                break
            mb = data.subset(perm[lo : lo + cfg.batch_size])
            out = model.teacher_forced_pass(mb)
            opt.zero_grad()
            out.nll.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            model.update_global_spectrum(out.embeddings)
            losses.append(out.nll.item())
            state.step += 1
        if not losses:
            break
        state.epoch += 1
        epoch_nll = float(np.mean(losses))
        record = {"epoch": state.epoch, "step": state.step, "train_nll": epoch_nll}

        if initial_nll is None:
            initial_nll = epoch_nll
        if not math.isfinite(epoch_nll):
            raise NumericError(f"training loss became non-finite at epoch {state.epoch}")
        bad_epochs = bad_epochs + 1 if epoch_nll > initial_nll + 9 * abs(initial_nll) else 0
        if bad_epochs >= 3:
            raise TrainingDiverged(f"loss {epoch_nll:.4g} exceeded 10x the initial {initial_nll:.4g} for 3 epochs")

        last_epoch = state.epoch >= cfg.epochs or not budget_left()
        if val_data is not None and (state.epoch % cfg.val_every == 0 or last_epoch):
            model.eval()
            val = validation_nd(model, val_data, cfg.val_samples, cfg.val_seed, cfg.scaling)
            record["val_nd"] = val
            if state.best_val_nd is None or val < state.best_val_nd:
                state.best_val_nd, state.best_epoch = val, state.epoch
                best_state = _snapshot(state)
        state.history.append(record)
        log.info("epoch %d step %d nll %.4f val_nd %s", state.epoch, state.step, epoch_nll, record.get("val_nd"))
        if on_epoch is not None:
            on_epoch(record)

    if best_state is not None:
        _restore(state, best_state)
    model.eval()
    return state


def _snapshot(state: TrainState) -> dict:
    return {
        "model": copy.deepcopy(state.model.state_dict()),
        "optimizer": copy.deepcopy(state.optimizer.state_dict()),
        "global_spectrum": state.model.global_spectrum,
    }


def _restore(state: TrainState, snap: dict) -> None:
    state.model.load_state_dict(snap["model"])
    state.optimizer.load_state_dict(snap["optimizer"])
    state.model.global_spectrum = snap["global_spectrum"]


# ---- checkpoints -------------------------------------------------------

CHECKPOINT_FORMAT = 1


def _spectrum_to_dict(gs: GlobalSpectrum) -> dict:
    return {
        "psd": [float(v) for v in gs.psd],
        "window": gs.window,
        "ema_decay": gs.ema_decay,
        "update_count": gs.update_count,
        "local_rms": gs.local_rms,
    }


def _spectrum_from_dict(d: dict) -> GlobalSpectrum:
    return GlobalSpectrum(
        psd=np.asarray(d["psd"], dtype=np.float64),
        window=d["window"],
        ema_decay=d["ema_decay"],
        update_count=d["update_count"],
        local_rms=d["local_rms"],
    )


def save_checkpoint(path, state: TrainState, **extra) -> dict:
    """Write a zip holding ``manifest.json`` and ``state.pt``; returns the manifest."""
    from . import __version__

    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "package_version": __version__,
        "model_config": state.model.config.to_dict(),
        "train_config": asdict(state.config),
        "global_spectrum": _spectrum_to_dict(state.model.global_spectrum),
        "epoch": state.epoch,
        "step": state.step,
        "best_epoch": state.best_epoch,
        "best_val_nd": state.best_val_nd,
        "history": state.history,
        **extra,
    }
    buf = io.BytesIO()
    torch.save({"model": state.model.state_dict(), "optimizer": state.optimizer.state_dict()}, buf)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        zf.writestr("state.pt", buf.getvalue())
    return manifest


def read_manifest(path) -> dict:
    from . import __version__

    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise InvalidArgument(f"{path} is not a checkpoint: {exc}") from exc
    found = (manifest.get("format_version"), manifest.get("package_version"))
    if found != (CHECKPOINT_FORMAT, __version__):
        raise VersionMismatch(
            f"checkpoint {path} has format {found[0]} / package {found[1]}; "
            f"this build reads format {CHECKPOINT_FORMAT} / package {__version__}"
        )
    return manifest


def load_checkpoint(path) -> Tuple[TrainState, dict]:
    manifest = read_manifest(path)
    with zipfile.ZipFile(path) as zf:
        payload = torch.load(io.BytesIO(zf.read("state.pt")), weights_only=True)
    train_config = TrainConfig(**manifest["train_config"])
    state = init_state(ModelConfig.from_dict(manifest["model_config"]), train_config)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.model.global_spectrum = _spectrum_from_dict(manifest["global_spectrum"])
    state.epoch, state.step = manifest["epoch"], manifest["step"]
    state.best_epoch, state.best_val_nd = manifest["best_epoch"], manifest["best_val_nd"]
    state.history = manifest["history"]
    state.model.eval()
    return state, manifest
