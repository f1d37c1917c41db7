"""Datasets: the two-regime sinusoid benchmark, CSV ingestion, covariates and scaling."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import IngestError, InvalidArgument

GRANULARITIES = {
    "hourly": ("hour_of_day", "day_of_week", "week_of_year", "month_of_year"),
    "daily": ("day_of_week", "week_of_year", "month_of_year"),
    "weekly": ("week_of_year", "month_of_year"),
    "monthly": ("month_of_year",),
    "index": (),
}

# synthetic timestamps: one sample every 1/200 s starting at this epoch
SYNTHETIC_EPOCH = pd.Timestamp("2000-01-01T00:00:00")


@dataclass
class TimeSeriesBatch:
    """``B`` aligned univariate series with covariates.

    Columns ``[0, t0)`` form the conditioning range and ``[t0, t0 + tau)``
    the forecast range.  ``targets`` are stored divided by ``scale``.
    """

    targets: np.ndarray
    covariates: np.ndarray
    series_ids: np.ndarray
    scale: np.ndarray
    t0: int
    tau: int
    timestamps: Optional[pd.DatetimeIndex] = None
    labels: Optional[Tuple[str, ...]] = None
    feature_names: Tuple[str, ...] = ()

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        b, t = self.targets.shape
        if self.covariates is None:
            self.covariates = np.zeros((b, t, 0))
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        if self.covariates.shape[:2] != (b, t):
            raise InvalidArgument(f"covariates {self.covariates.shape} do not match targets {(b, t)}")
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.scale.shape != (b,) or np.any(self.scale <= 0):
            raise InvalidArgument("scale must be a positive vector of length B")
        if self.t0 + self.tau != t:
            raise InvalidArgument(f"t0 + tau = {self.t0 + self.tau} != T = {t}")
        if np.isnan(self.targets[:, : self.t0]).any():
            raise InvalidArgument("targets contain NaN in the conditioning range")
        if not np.isfinite(self.covariates).all():
            raise InvalidArgument("covariates must be finite")

    @property
    def n_series(self) -> int:
        return self.targets.shape[0]

    @property
    def length(self) -> int:
        return self.targets.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    def unscaled(self) -> np.ndarray:
        return self.targets * self.scale[:, None]

    def subset(self, index) -> "TimeSeriesBatch":
        index = np.asarray(index)
        labels = None if self.labels is None else tuple(self.labels[i] for i in index)
        return replace(
            self,
            targets=self.targets[index],
            covariates=self.covariates[index],
            series_ids=self.series_ids[index],
            scale=self.scale[index],
            labels=labels,
        )

    def window(self, start: int, t0: int, tau: int) -> "TimeSeriesBatch":
        """Columns ``[start, start + t0 + tau)`` re-split at ``t0``; scale is reset to one."""
        stop = start + t0 + tau
        if start < 0 or stop > self.length:
            raise InvalidArgument(f"window [{start}, {stop}) outside series of length {self.length}")
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return replace(
            self,
            targets=self.unscaled()[:, start:stop],
            covariates=self.covariates[:, start:stop],
            scale=np.ones(self.n_series),
            t0=t0,
            tau=tau,
            timestamps=ts,
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the two-regime sinusoid benchmark.

    ``sigma_nu`` is the noise *variance*.  Each half of every series is drawn
    from regime one (frequency intervals 0 and 1) or regime two (intervals 2
    and 3) by an independent Bernoulli(``bernoulli_theta``) draw.
    """

    n_series: int = 500
    length: int = 200
    sigma_nu: float = 0.5
    amplitudes: Tuple[float, float, float, float] = (2.0, 2.0, 2.0, 2.0)
    freq_ranges: Tuple[Tuple[float, float], ...] = ((1.0, 5.0), (15.0, 20.0), (5.0, 10.0), (20.0, 25.0))
    bernoulli_theta: float = 0.5
    sample_rate: float = 200.0
    seed: int = 0
    fixed_freqs: Optional[Tuple[float, float, float, float]] = None
    fixed_branches: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.length % 2:
            raise InvalidArgument("length must be even")
        if len(self.freq_ranges) != 4 or any(lo >= hi for lo, hi in self.freq_ranges):
            raise InvalidArgument("need four increasing frequency intervals")
        if self.sigma_nu < 0:
            raise InvalidArgument("sigma_nu is a variance and must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("amplitudes", "fixed_freqs", "fixed_branches"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        d["freq_ranges"] = tuple(tuple(r) for r in d["freq_ranges"])
        return cls(**d)


@dataclass
class SyntheticDraw:
    batch: TimeSeriesBatch
    clean: np.ndarray
    freqs: np.ndarray
    branches: np.ndarray


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDraw:
    rng = np.random.default_rng(spec.seed)
    n, t_len = spec.n_series, spec.length
    t = np.arange(t_len) / spec.sample_rate
    half = t_len // 2

    if spec.fixed_freqs is not None:
        freqs = np.tile(np.asarray(spec.fixed_freqs, dtype=np.float64), (n, 1))
    else:
        lo = np.array([r[0] for r in spec.freq_ranges])
        hi = np.array([r[1] for r in spec.freq_ranges])
        freqs = rng.uniform(lo, hi, size=(n, 4))
    if spec.fixed_branches is not None:
        branches = np.tile(np.asarray(spec.fixed_branches, dtype=np.int64), (n, 1))
    else:
        branches = rng.binomial(1, spec.bernoulli_theta, size=(n, 2))

    amp = np.asarray(spec.amplitudes)
    waves = amp[None, :, None] * np.sin(2 * np.pi * freqs[:, :, None] * t[None, None, :])
    regime = np.stack([waves[:, 0] + waves[:, 1], waves[:, 2] + waves[:, 3]], axis=1)  # (n, 2, T)
    rows = np.arange(n)
    clean = np.concatenate(
        [regime[rows, branches[:, 0], :half], regime[rows, branches[:, 1], half:]], axis=1
    )
    noise = rng.normal(0.0, np.sqrt(spec.sigma_nu), size=(n, t_len))
    targets = clean + noise

    timestamps = SYNTHETIC_EPOCH + pd.to_timedelta(np.arange(t_len) * (1e3 / spec.sample_rate), unit="ms")
    batch = TimeSeriesBatch(
        targets=targets,
        covariates=np.zeros((n, t_len, 0)),
        series_ids=np.arange(n),
        scale=np.ones(n),
        t0=t_len,
        tau=0,
        timestamps=pd.DatetimeIndex(timestamps),
        labels=tuple(str(i) for i in range(n)),
    )
    return SyntheticDraw(batch=batch, clean=clean, freqs=freqs, branches=branches)


def write_csv(batch: TimeSeriesBatch, path) -> None:
    """Long-format CSV (``series_id,timestamp,value``) of the unscaled targets."""
    b, t = batch.targets.shape
    if batch.timestamps is None:
        raise InvalidArgument("batch has no timestamps")
    labels = batch.labels or tuple(str(i) for i in batch.series_ids)
    frame = pd.DataFrame(
        {
            "series_id": np.repeat(np.asarray(labels, dtype=object), t),
            "timestamp": np.tile(batch.timestamps.strftime("%Y-%m-%dT%H:%M:%S.%f"), b),
            "value": batch.unscaled().reshape(-1),
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g")


def load_csv(path, fill_limit: int = 1) -> TimeSeriesBatch:
    """Read a long-format CSV and pivot it to a ``B x T`` batch.

    Interior gaps of up to ``fill_limit`` samples are forward-filled; longer
    gaps, irregular spacing, or series that do not span the common range
    raise :class:`IngestError`.
    """
    try:
        raw = pd.read_csv(path, dtype={"series_id": str, "value": str, "timestamp": str}, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    missing = {"series_id", "timestamp", "value"} - set(raw.columns)
    if missing:
        raise IngestError(f"missing columns: {sorted(missing)}")

    values = pd.to_numeric(raw["value"], errors="coerce")
    if values.isna().any():
        row = int(np.flatnonzero(values.isna())[0]) + 2  # 1-based, after the header
        raise IngestError(f"non-numeric value {raw['value'].iloc[row - 2]!r} at row {row}")
    # pandas' fast parser can be off by one ulp; re-parse with correctly rounded conversion
    values = pd.Series(raw["value"].to_numpy().astype(np.float64), index=raw.index)
    try:
        stamps = pd.to_datetime(raw["timestamp"], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise IngestError(f"unparseable timestamp: {exc}") from exc

    frame = pd.DataFrame({"series_id": raw["series_id"], "timestamp": stamps, "value": values})
    if frame.duplicated(["series_id", "timestamp"]).any():
        raise IngestError("duplicate (series_id, timestamp) rows")
    frame = frame.sort_values(["series_id", "timestamp"], kind="stable")

    diffs = frame.groupby("series_id")["timestamp"].diff().dropna()
    if diffs.empty:
        raise IngestError("need at least two timestamps per series")
    step = diffs.mode().iloc[0]
    ratio = diffs / step
    irregular = frame.loc[ratio.index[(ratio != ratio.round()) | (ratio < 1)], "series_id"].unique()
    if len(irregular):
        raise IngestError(f"irregular timestamps in series: {sorted(irregular)}")

    grid = pd.date_range(frame["timestamp"].min(), frame["timestamp"].max(), freq=step)
    order = raw["series_id"].unique()
    wide = frame.pivot(index="timestamp", columns="series_id", values="value").reindex(index=grid, columns=order)
    short = [c for c in wide.columns if wide[c].iloc[[0, -1]].isna().any()]
    if short:
        raise IngestError(f"series do not span the common range: {short}")
    too_long = [c for c in wide.columns if _longest_gap(wide[c].isna().to_numpy()) > fill_limit]
    if too_long:
        raise IngestError(f"gaps longer than {fill_limit} in series: {too_long}")
    wide = wide.ffill()

    labels = tuple(str(c) for c in wide.columns)
    b, t = len(labels), len(grid)
    return TimeSeriesBatch(
        targets=wide.to_numpy().T.copy(),
        covariates=np.zeros((b, t, 0)),
        series_ids=np.arange(b),
        scale=np.ones(b),
        t0=t,
        tau=0,
        timestamps=grid,
        labels=labels,
    )


def _longest_gap(missing: np.ndarray) -> int:
    longest = run = 0
    for m in missing:
        run = run + 1 if m else 0
        longest = max(longest, run)
    return longest


def _calendar(ts: pd.DatetimeIndex, name: str) -> np.ndarray:
    if name == "hour_of_day":
        return ts.hour.to_numpy()
    if name == "day_of_week":
        return ts.dayofweek.to_numpy()
    if name == "week_of_year":
        return ts.isocalendar().week.to_numpy()
    if name == "month_of_year":
        return ts.month.to_numpy()
    raise InvalidArgument(name)


def build_covariates(
    batch: TimeSeriesBatch, granularity: str, train_end: Optional[int] = None, include_id: bool = True
) -> TimeSeriesBatch:
    """Append calendar features, a ``[0, 1]`` age ramp and the series index.

    Calendar features are standardized with statistics of columns
    ``[0, train_end)``.  ``granularity="index"`` adds no calendar features.
    """
    if granularity not in GRANULARITIES:
        raise InvalidArgument(f"unknown granularity {granularity!r}; expected one of {sorted(GRANULARITIES)}")
    b, t = batch.targets.shape
    train_end = t if train_end is None else train_end
    names = GRANULARITIES[granularity]
    if names and batch.timestamps is None:
        raise InvalidArgument("calendar covariates need timestamps")

    feats, feat_names = [], []
    for name in names:
        raw = _calendar(batch.timestamps, name).astype(np.float64)
        mu, sd = raw[:train_end].mean(), raw[:train_end].std()
        col = (raw - mu) / sd if sd > 0 else raw - mu
        feats.append(np.broadcast_to(col, (b, t)))
        feat_names.append(name)
    age = np.arange(t) / max(t - 1, 1)
    feats.append(np.broadcast_to(age, (b, t)))
    feat_names.append("age")
    if include_id:
        feats.append(np.broadcast_to(batch.series_ids[:, None].astype(np.float64), (b, t)))
        feat_names.append("series_id")

    new = np.stack(feats, axis=-1)
    return replace(
        batch,
        covariates=np.concatenate([batch.covariates, new], axis=-1),
        feature_names=batch.feature_names + tuple(feat_names),
    )


def scale_series(batch: TimeSeriesBatch) -> TimeSeriesBatch:
    """Divide each series by ``1 + mean |z|`` over its conditioning range."""
    z = batch.targets[:, : batch.t0]
    s = 1.0 + (np.abs(z).mean(axis=1) if z.shape[1] else np.zeros(batch.n_series))
    return replace(batch, targets=batch.targets / s[:, None], scale=batch.scale * s)


def training_windows(batch: TimeSeriesBatch, length: int, stride: int, end: Optional[int] = None) -> TimeSeriesBatch:
    """Fully observed windows of ``length`` columns taken every ``stride`` columns before ``end``."""
    end = batch.length if end is None else end
    starts = list(range(0, end - length + 1, stride))
    if not starts:
        raise InvalidArgument(f"no window of length {length} fits before column {end}")
    parts = [batch.window(s, length, 0) for s in starts]
    return _stack(parts)


def _stack(parts: Sequence[TimeSeriesBatch]) -> TimeSeriesBatch:
    first = parts[0]
    labels = None if first.labels is None else tuple(l for p in parts for l in p.labels)
    return TimeSeriesBatch(
        targets=np.concatenate([p.unscaled() for p in parts]),
        covariates=np.concatenate([p.covariates for p in parts]),
        series_ids=np.concatenate([p.series_ids for p in parts]),
        scale=np.ones(sum(p.n_series for p in parts)),
        t0=first.t0,
        tau=first.tau,
        labels=labels,
        feature_names=first.feature_names,
    )


def checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, csv_path, spec: Optional[SyntheticSpec] = None, **extra) -> dict:
    manifest = {"csv": Path(csv_path).name, "sha256": checksum(csv_path), **extra}
    if spec is not None:
        manifest["synthetic"] = spec.to_dict()
        manifest["seed"] = spec.seed
        manifest["sigma_nu_variance"] = spec.sigma_nu
        manifest["time_axis"] = f"t = k / {spec.sample_rate:g} s for k = 0..{spec.length - 1}"
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
