"""Command-line entry point: generate, train, eval, ablate, dump, plot.

Every command resolves its settings from built-in defaults, an optional INI
file (``--config``) and command-line flags, in that order of precedence,
and writes the resolved file back into its run directory.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .data import (
    SyntheticSpec,
    TimeSeriesBatch,
    build_covariates,
    generate_synthetic,
    load_csv,
    training_windows,
    write_csv,
    write_manifest,
)
from .errors import ForecastError, IngestError, InvalidArgument, NumericError, VersionMismatch

log = logging.getLogger("spectral_forecast")

RUN_ROOT_ENV = "SPECTRAL_FORECAST_RUN_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRIC_ROWS = ("ND", "RMSE", "QL_0.5", "QL_0.9")

# section -> key -> (type, default); CLI flag names are the keys with dashes
DEFAULTS: Dict[str, Dict[str, Tuple[type, object]]] = {
    "data": {
        "source": (str, "synthetic"),
        "path": (str, ""),
        "n_series": (int, 500),
        "length": (int, 200),
        "sigma_nu": (float, 0.5),
        "data_seed": (int, 0),
        "granularity": (str, "none"),
        "fill_limit": (int, 1),
        "split": (str, "series"),
        "val_fraction": (float, 0.2),
        "t0": (int, 110),
        "tau": (int, 90),
    },
    "model": {
        "use_sa": (bool, True),
        "d_embed": (int, 10),
        "n_layers": (int, 3),
        "t_filter": (int, 32),
        "gate_hidden": (int, 64),
        "cell": (str, "lstm"),
        "sigma_min": (float, 1e-3),
        "psd_window": (str, "bartlett"),
        "ema_decay": (float, 0.9),
        "global_scale_mode": (str, "match-rms"),
        "dtype": (str, "float32"),
    },
    "train": {
        "epochs": (int, 50),
        "batch_size": (int, 128),
        "lr": (float, 1e-3),
        "clip_norm": (float, 10.0),
        "max_steps": (int, -1),
        "val_samples": (int, 100),
        "val_every": (int, 1),
        "scaling": (bool, True),
    },
    "eval": {
        "n_samples": (int, 200),
        "n_windows": (int, 1),
        "repeats": (int, 10),
    },
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---- configuration ---------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _convert(kind: type, text):
    if kind is bool:
        return text if isinstance(text, bool) else _parse_bool(text)
    try:
        return kind(text)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"cannot read {text!r} as {kind.__name__}") from exc


def resolve_config(config_path: Optional[str], overrides: Dict[str, object]) -> Dict[str, Dict[str, object]]:
    """Defaults, then the INI file, then non-``None`` CLI overrides (keyed by option name)."""
    cfg = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in DEFAULTS.items()}
    if config_path:
        parser = configparser.ConfigParser()
        if not parser.read(config_path):
            raise UsageError(f"cannot read config file {config_path}")
        for sec in parser.sections():
            if sec == "run":
                cfg["run"] = {"seed": int(parser[sec].get("seed", 0))}
                continue
            if sec not in DEFAULTS:
                raise UsageError(f"unknown config section [{sec}]")
            for key, text in parser[sec].items():
                if key not in DEFAULTS[sec]:
                    raise UsageError(f"unknown config key {sec}.{key}")
                cfg[sec][key] = _convert(DEFAULTS[sec][key][0], text)
    seed = overrides.get("seed")
    if seed is not None or "run" not in cfg:
        cfg["run"] = {"seed": 0 if seed is None else int(seed)}
    for key, value in overrides.items():
        if value is None:
            continue
        for sec, keys in DEFAULTS.items():
            if key in keys:
                cfg[sec][key] = _convert(keys[key][0], value)
    return cfg


def write_config(cfg: Dict[str, Dict[str, object]], path: Path) -> None:
    parser = configparser.ConfigParser()
    for sec, values in cfg.items():
        parser[sec] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def _add_overrides(p: argparse.ArgumentParser, sections) -> None:
    for sec in sections:
        group = p.add_argument_group(f"[{sec}] overrides")
        for key, (kind, default) in DEFAULTS[sec].items():
            flag = "--" + key.replace("_", "-")
            group.add_argument(flag, dest=key, default=None, metavar=kind.__name__.upper(), help=f"default {default}")


def _run_dir(args, command: str, seed: int) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        path = root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---- data preparation -------------------------------------------------------


def load_dataset(data_cfg: dict) -> TimeSeriesBatch:
    if data_cfg["source"] == "synthetic":
        spec = SyntheticSpec(
            n_series=data_cfg["n_series"],
            length=data_cfg["length"],
            sigma_nu=data_cfg["sigma_nu"],
            seed=data_cfg["data_seed"],
        )
        batch = generate_synthetic(spec).batch
    elif data_cfg["source"] == "csv":
        if not data_cfg["path"]:
            raise UsageError("data.source = csv needs data.path")
        batch = load_csv(data_cfg["path"], fill_limit=data_cfg["fill_limit"])
    else:
        raise UsageError(f"unknown data source {data_cfg['source']!r}")
    return batch


def prepare_splits(data_cfg: dict) -> Tuple[TimeSeriesBatch, TimeSeriesBatch, TimeSeriesBatch]:
    """Deterministic (train, validation, test) batches for a data section.

    ``split = series``: the last ``val_fraction`` of the series are held out;
    the rest train fully observed, validation and test both use the held-out
    series' final window.  ``split = time``: training windows end before the
    validation window, which ends ``tau`` columns before the series end; the
    test window is the final ``t0 + tau`` columns.
    """
    batch = load_dataset(data_cfg)
    t0, tau = data_cfg["t0"], data_cfg["tau"]
    length = batch.length
    if t0 + tau > length:
        raise InvalidArgument(f"t0 + tau = {t0 + tau} exceeds series length {length}")
    if data_cfg["granularity"] != "none":
        train_end = length - tau if data_cfg["split"] == "time" else length
        batch = build_covariates(batch, data_cfg["granularity"], train_end=train_end)

    if data_cfg["split"] == "series":
        n_val = max(1, int(round(batch.n_series * data_cfg["val_fraction"])))
        if n_val >= batch.n_series:
            raise InvalidArgument("validation split leaves no training series")
        idx = np.arange(batch.n_series)
        train = batch.subset(idx[:-n_val])
        held = batch.subset(idx[-n_val:])
        test = held.window(length - t0 - tau, t0, tau)
        return train, test, test
    if data_cfg["split"] == "time":
        val_start = length - tau - t0 - tau
        if val_start < 0:
            raise InvalidArgument("series too short for a time split with this t0/tau")
        val = batch.window(val_start, t0, tau)
        train = training_windows(batch, t0 + tau, max(1, tau), end=length - tau)
        test = batch.window(length - t0 - tau, t0, tau)
        return train, val, test
    raise UsageError(f"unknown split {data_cfg['split']!r}")


def model_config_from(cfg: dict, n_covariates: int):
    from .model import ModelConfig

    m = cfg["model"]
    return ModelConfig.build(
        d_embed=m["d_embed"],
        n_layers=m["n_layers"],
        t_filter=m["t_filter"],
        n_covariates=n_covariates,
        gate_hidden=m["gate_hidden"],
        cell=m["cell"],
        use_sa=m["use_sa"],
        sigma_min=m["sigma_min"],
        psd_window=m["psd_window"],
        ema_decay=m["ema_decay"],
        global_scale_mode=m["global_scale_mode"],
        dtype=m["dtype"],
        n_samples=cfg["eval"]["n_samples"],
    )


def train_config_from(cfg: dict, seed: int):
    from .model import TrainConfig

    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        lr=t["lr"],
        clip_norm=t["clip_norm"],
        seed=seed,
        max_steps=None if t["max_steps"] < 0 else t["max_steps"],
        val_samples=t["val_samples"],
        val_seed=seed + 12345,
        val_every=t["val_every"],
        scaling=t["scaling"],
    )


# ---- commands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    csv_path, manifest_path = out / "data.csv", out / "manifest.json"
    if (csv_path.exists() or manifest_path.exists()) and not args.force:
        raise UsageError(f"{csv_path} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(n_series=args.n, length=args.length, sigma_nu=args.sigma_nu, seed=args.seed)
    draw = generate_synthetic(spec)
    write_csv(draw.batch, csv_path)
    np.save(out / "clean.npy", draw.clean)
    write_manifest(manifest_path, csv_path, spec, package_version=__version__)
    print(f"wrote {spec.n_series} series of length {spec.length} (sigma_nu^2 = {spec.sigma_nu:g}) to {csv_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import init_state, save_checkpoint, train

    cfg = resolve_config(args.config, vars(args))
    seed = cfg["run"]["seed"]
    run_dir = _run_dir(args, "train", seed)
    write_config(cfg, run_dir / "config.ini")
    train_b, val_b, _ = prepare_splits(cfg["data"])
    state = init_state(model_config_from(cfg, train_b.n_covariates), train_config_from(cfg, seed))

    metrics_path = run_dir / "metrics.jsonl"
    metrics_path.write_text("")

    def stream(record):
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    train(state, train_b, val_b, on_epoch=stream)
    save_checkpoint(run_dir / "checkpoint.zip", state, seed=seed, resolved_config=cfg)
    print(f"trained {state.step} steps over {state.epoch} epochs; best validation ND {state.best_val_nd} at epoch {state.best_epoch}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _load(args):
    from .model import load_checkpoint

    state, manifest = load_checkpoint(args.checkpoint)
    cfg = manifest["resolved_config"]
    overrides = {k: getattr(args, k, None) for k in DEFAULTS["data"]}
    for key, value in overrides.items():
        if value is not None:
            cfg["data"][key] = _convert(DEFAULTS["data"][key][0], value)
    return state, manifest, cfg


def _eval_batch(args, cfg) -> TimeSeriesBatch:
    _, val_b, test_b = prepare_splits(cfg["data"])
    return val_b if args.subset == "val" else test_b


def evaluate_repeats(model, batch: TimeSeriesBatch, n_samples: int, repeats: int, seed: int, scaling: bool):
    from .metrics import rolling_evaluate

    reports = [
        rolling_evaluate(model, batch, batch.t0, batch.tau, n_samples=n_samples, seed=seed + 7919 * r, scaling=scaling)
        for r in range(repeats)
    ]
    rows = [r.row() for r in reports]
    summary = {k: (float(np.mean([r[k] for r in rows])), float(np.std([r[k] for r in rows]))) for k in METRIC_ROWS}
    return summary, reports


def format_table(columns: Dict[str, Dict[str, Tuple[float, float]]]) -> str:
    names = list(columns)
    lines = ["metric  " + "  ".join(f"{n:>24}" for n in names)]
    for key in METRIC_ROWS:
        cells = "  ".join(f"{columns[n][key][0]:>12.5f} ± {columns[n][key][1]:<9.5f}" for n in names)
        lines.append(f"{key:<7} " + cells)
    return "\n".join(lines)


def cmd_eval(args) -> int:
    state, manifest, cfg = _load(args)
    batch = _eval_batch(args, cfg)
    n_samples = args.n_samples or cfg["eval"]["n_samples"]
    repeats = args.repeats or cfg["eval"]["repeats"]
    seed = manifest["seed"] + 12345 if args.seed is None else args.seed
    summary, reports = evaluate_repeats(state.model, batch, n_samples, repeats, seed, cfg["train"]["scaling"])
    print(f"t0={batch.t0} tau={batch.tau} series={batch.n_series} samples={n_samples} repeats={repeats}")
    print(format_table({"model": summary}))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval-{args.subset}.json"
    out.write_text(json.dumps({"summary": summary, "reports": [r.to_dict() for r in reports]}, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    state, manifest, cfg = _load(args)
    batch = _eval_batch(args, cfg)
    n_samples = args.n_samples or cfg["eval"]["n_samples"]
    repeats = args.repeats or cfg["eval"]["repeats"]
    seed = manifest["seed"] + 12345 if args.seed is None else args.seed
    model = state.model
    if model.config.use_sa:
        variants = {
            "full": model,
            "no_local (a_l=1)": model.with_flags(ablate_local=True),
            "no_global (a_g=0)": model.with_flags(ablate_global=True),
        }
    else:
        variants = {"full = ablations (no SA)": model}
    columns = {
        name: evaluate_repeats(m, batch, n_samples, repeats, seed, cfg["train"]["scaling"])[0]
        for name, m in variants.items()
    }
    print(format_table(columns))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "ablation.json"
    out.write_text(json.dumps(columns, indent=2))
    return EXIT_OK


def cmd_dump(args) -> int:
    state, manifest, cfg = _load(args)
    batch = _eval_batch(args, cfg)
    idx = np.arange(min(args.count, batch.n_series))
    trace = state.model.trace(batch.subset(idx), seed=args.seed or 0)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "trace.npz"
    np.savez_compressed(out, **trace)
    print(f"wrote {sorted(trace)} to {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    written: List[Path] = []
    metrics = run_dir / "metrics.jsonl"
    if metrics.exists():
        records = [json.loads(line) for line in metrics.read_text().splitlines() if line.strip()]
        fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
        a.plot([r["epoch"] for r in records], [r["train_nll"] for r in records])
        a.set_xlabel("epoch")
        a.set_ylabel("training NLL")
        val = [r for r in records if "val_nd" in r]
        b.plot([r["epoch"] for r in val], [r["val_nd"] for r in val], marker="o")
        b.set_xlabel("epoch")
        b.set_ylabel("validation ND")
        fig.tight_layout()
        written.append(run_dir / "curves.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    trace_path = run_dir / "trace.npz"
    if trace_path.exists():
        trace = np.load(trace_path)
        if "filtered" in trace:
            emb_w, filt = trace["window"][args.series, -1], trace["filtered"][args.series, -1]
            d = emb_w.shape[0]
            fig, axes = plt.subplots(d, 1, figsize=(8, 1.6 * d), sharex=True, squeeze=False)
            for k in range(d):
                axes[k, 0].plot(emb_w[k], color="tab:blue", label="buffered embedding")
                axes[k, 0].plot(filt[k], color="tab:red", label="filtered embedding")
                axes[k, 0].set_ylabel(f"dim {k}")
            axes[0, 0].legend(loc="upper right", fontsize=7)
            axes[-1, 0].set_xlabel("buffer column (oldest to newest)")
            fig.tight_layout()
            written.append(run_dir / "embeddings.png")
            fig.savefig(written[-1], dpi=100)
            plt.close(fig)
    if not written:
        raise InvalidArgument(f"nothing to plot in {run_dir} (no metrics.jsonl or trace.npz)")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="spectral-forecast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("generate", help="write a synthetic two-regime sinusoid dataset")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--length", type=int, default=200)
    p.add_argument("--sigma-nu", type=float, default=0.5, help="noise variance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="default: [run] seed of --config, else 0")
    p.add_argument("--run-dir")
    _add_overrides(p, ("data", "model", "train", "eval"))
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("eval", cmd_eval, "evaluate a checkpoint (mean ± std over repeats)"),
        ("ablate", cmd_ablate, "evaluate a checkpoint with gates forced (a_l=1, a_g=0)"),
        ("dump", cmd_dump, "write step-by-step attention internals to trace.npz"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--subset", choices=("val", "test"), default="test")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name == "dump":
            p.add_argument("--count", type=int, default=4, help="number of series to trace")
        else:
            p.add_argument("--n-samples", type=int)
            p.add_argument("--repeats", type=int)
        _add_overrides_data(p)
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="render curves and embedding overlays from a run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--series", type=int, default=0)
    p.set_defaults(func=cmd_plot)
    return parser


def _add_overrides_data(p) -> None:
    group = p.add_argument_group("data overrides")
    for key in ("source", "path", "n_series", "sigma_nu", "data_seed", "t0", "tau"):
        group.add_argument("--" + key.replace("_", "-"), dest=key, default=None)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidArgument, VersionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ForecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
