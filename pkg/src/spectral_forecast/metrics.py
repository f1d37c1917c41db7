"""Normalized quantile loss, ND and RMSE, plus the rolling-window evaluation protocol."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import TimeSeriesBatch, scale_series
from .errors import InvalidArgument, UndefinedMetric

log = logging.getLogger(__name__)


def _check(z, zhat):
    z = np.asarray(z, dtype=np.float64)
    zhat = np.asarray(zhat, dtype=np.float64)
    if z.shape != zhat.shape:
        raise InvalidArgument(f"shape mismatch: {z.shape} vs {zhat.shape}")
    denom = np.abs(z).sum()
    if denom == 0:
        raise UndefinedMetric("sum of |z| is zero; normalized metric undefined")
    return z, zhat, denom


def quantile_loss(z, zhat, rho: float) -> float:
    """``2 * sum P_rho(z, zhat) / sum |z|`` with the pinball loss ``P_rho``."""
    if not 0 < rho < 1:
        raise InvalidArgument("rho must lie in (0, 1)")
    z, zhat, denom = _check(z, zhat)
    diff = z - zhat
    pinball = np.where(diff > 0, rho * diff, (rho - 1.0) * diff)
    return float(2.0 * pinball.sum() / denom)


def nd(z, zhat) -> float:
    z, zhat, denom = _check(z, zhat)
    return float(np.abs(z - zhat).sum() / denom)


def rmse(z, zhat) -> float:
    """Root mean squared error normalized by the mean absolute target."""
    z, zhat, denom = _check(z, zhat)
    return float(np.sqrt(np.mean((z - zhat) ** 2)) / (denom / z.size))


def empirical_quantile(samples, rho, axis: int = 0) -> np.ndarray:
    """Linear-interpolation quantile with inclusive endpoints (numpy's default)."""
    return np.quantile(np.asarray(samples, dtype=np.float64), rho, axis=axis)


def summarize(z, quantile_forecasts: Dict[float, np.ndarray]) -> dict:
    """ND/RMSE use the median forecast; one ``QL`` entry per supplied quantile."""
    point = quantile_forecasts[0.5]
    return {
        "nd": nd(z, point),
        "rmse": rmse(z, point),
        "ql": {float(r): quantile_loss(z, q, r) for r, q in sorted(quantile_forecasts.items())},
    }


@dataclass
class EvalReport:
    ql: Dict[float, float]
    nd: float
    rmse: float
    n_windows: int
    n_samples: int
    skipped: int = 0
    per_window: List[dict] = field(default_factory=list)
    per_series: Dict[str, Optional[float]] = field(default_factory=dict)

    def row(self) -> dict:
        out = {"ND": self.nd, "RMSE": self.rmse}
        for r, v in sorted(self.ql.items()):
            out[f"QL_{r:g}"] = v
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ql"] = {f"{k:g}": v for k, v in self.ql.items()}
        for w in d["per_window"]:
            w["ql"] = {f"{k:g}": v for k, v in w["ql"].items()}
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def window_csv(self, path) -> None:
        rhos = sorted(self.ql)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "start", "nd", "rmse"] + [f"ql_{r:g}" for r in rhos])
            for row in self.per_window:
                w.writerow([row["window"], row["start"], row["nd"], row["rmse"]] + [row["ql"][r] for r in rhos])


def window_starts(length: int, t0: int, tau: int, n_windows: int, stride: Optional[int] = None) -> List[int]:
    """Start columns of the last ``n_windows`` windows, the final one ending at ``length``."""
    stride = tau if stride is None else stride
    return [length - (n_windows - k) * stride - t0 - tau + stride for k in range(n_windows)]


def rolling_evaluate(
    model,
    series: TimeSeriesBatch,
    t0: int,
    tau: int,
    n_windows: int = 1,
    stride: Optional[int] = None,
    n_samples: int = 200,
    seed: int = 0,
    quantiles: Sequence[float] = (0.5, 0.9),
    scaling: bool = True,
) -> EvalReport:
    """Forecast each window afresh from its own conditioning range and pool the errors.

    ``model`` needs a ``forecast(batch, n_samples=..., seed=...)`` method
    returning an object with ``samples`` of shape ``(B, S, tau)`` in original
    units.  Windows that would start before column zero are skipped.
    """
    quantiles = tuple(sorted(set(quantiles) | {0.5}))
    zs, qs, per_window, skipped = [], {r: [] for r in quantiles}, [], 0
    for k, start in enumerate(window_starts(series.length, t0, tau, n_windows, stride)):
        if start < 0:
            skipped += 1
            continue
        batch = series.window(start, t0, tau)
        if scaling:
            batch = scale_series(batch)
        result = model.forecast(batch, n_samples=n_samples, seed=seed + k)
        z = batch.unscaled()[:, t0:]
        qf = {r: empirical_quantile(result.samples, r, axis=1) for r in quantiles}
        zs.append(z)
        for r in quantiles:
            qs[r].append(qf[r])
        per_window.append({"window": k, "start": start, **summarize(z, qf)})
    if skipped:
        log.warning("skipped %d evaluation windows that exceed the series length", skipped)
    if not zs:
        raise InvalidArgument("no evaluation window fits in the series")

    z_all = np.concatenate(zs, axis=1)
    q_all = {r: np.concatenate(v, axis=1) for r, v in qs.items()}
    pooled = summarize(z_all, q_all)

    per_series = {}
    labels = series.labels or tuple(str(i) for i in series.series_ids)
    for i, label in enumerate(labels):
        denom = np.abs(z_all[i]).sum()
        per_series[label] = None if denom == 0 else float(np.abs(z_all[i] - q_all[0.5][i]).sum() / denom)
    return EvalReport(
        ql=pooled["ql"],
        nd=pooled["nd"],
        rmse=pooled["rmse"],
        n_windows=len(zs),
        n_samples=n_samples,
        skipped=skipped,
        per_window=per_window,
        per_series=per_series,
    )
