"""Command-line surface: synth, ingest, train, predict, evaluate, report.

Every command resolves one JSON config (flags override), writes its artifacts
under --out and records them, with checksums and stage timings, in the run
directory's manifest.json. Commands are idempotent for identical inputs and
seed; errors exit non-zero naming the failing stage.
"""

from __future__ import annotations

import csv as _csv
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .features import SampleBatch, build_dataset
from .ingest import bin_events, parse_events, write_events_csv
from .metrics import MetricReport, mean_top_n, rmse
from .nn import load_checkpoint_file, param_count, save_checkpoint_file
from .pipeline import (ForecastRun, TrainConfig, fit_scale_bounds, predict_batch,
                       train, write_metrics_json, write_report)
from .regularize import cumulate, scale_values, upsample_grid
from .runconfig import ExperimentConfig
from .synth import generate
from .tensorfile import canonical_json, load_grid, save_grid

log = logging.getLogger("gridcast")


def _setup_logging():
    level = os.environ.get("GRIDCAST_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Manifest:
    """Per-run ledger of emitted artifacts, their checksums and timings."""

    def __init__(self, out_dir: Path, config: ExperimentConfig, config_path):
        self.path = out_dir / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))
        else:
            self.data = {"tool": "gridcast", "version": __version__, "artifacts": {}}
        self.data["seed"] = config.seed
        self.data["config"] = config.raw
        self.data["config_path"] = str(config_path) if config_path else None

    def record(self, producer: str, paths, seconds: float):
        for p in paths:
            p = Path(p)
            self.data["artifacts"][p.name] = {
                "sha256": _sha256(p), "producer": producer,
                "seconds": round(seconds, 3),
            }
        self.data["updated"] = datetime.now(timezone.utc).isoformat()
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")


def _load_config(config_path, **overrides) -> ExperimentConfig:
    try:
        return ExperimentConfig.load(config_path, **overrides)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"config: {exc}")


def _fail(stage: str, exc: Exception) -> "click.ClickException":
    log.error("%s failed: %s", stage, exc)
    return click.ClickException(f"{stage}: {exc}")


def _require(path: str, what: str, producer: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise click.ClickException(
            f"{what} not found at {p}; produce it with `gridcast {producer}` first")
    return p


out_option = click.option("--out", required=True, type=click.Path(file_okay=False),
                          help="Run directory for artifacts and the manifest.")
config_option = click.option("--config", "config_path", default=None,
                             type=click.Path(exists=True, dir_okay=False),
                             help="JSON config file; defaults apply otherwise.")
seed_option = click.option("--seed", type=int, default=None,
                           help="Override the config seed.")


@click.group()
@click.version_option(version=__version__, prog_name="gridcast")
def main():
    """Grid-based hourly event forecasting pipeline."""
    _setup_logging()


@main.command("synth")
@config_option
@out_option
@seed_option
def cmd_synth(config_path, out, seed):
    """Generate a synthetic event stream and write events.csv."""
    cfg = _load_config(config_path, seed=seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        events = generate(cfg.synth)
        path = out_dir / "events.csv"
        write_events_csv(str(path), events)
    except (ValueError, OSError) as exc:
        raise _fail("synth", exc)
    Manifest(out_dir, cfg, config_path).record("synth", [path],
                                               time.perf_counter() - t0)
    click.echo(f"synth: wrote {len(events)} events to {path}")


@main.command("ingest")
@config_option
@click.option("--events", "events_path", required=True, type=click.Path(),
              help="Input CSV of events.")
@out_option
@seed_option
def cmd_ingest(config_path, events_path, out, seed):
    """Parse and bin events into grid.tensor."""
    cfg = _load_config(config_path, seed=seed)
    src = _require(events_path, "events file", "synth")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        result = parse_events(str(src), cfg.columns, cfg.utc_offset_seconds)
        if not result.records:
            raise ValueError("no parseable events in the file")
        times = [e.start_time for e in result.records]
        pseconds = cfg.period_slots * cfg.grid.slot_seconds
        t_start = (int(min(times)) // pseconds) * pseconds
        t_end = -(-int(max(times) + 1) // pseconds) * pseconds
        grid = bin_events(result.records, cfg.grid, t_start, t_end)
        path = out_dir / "grid.tensor"
        save_grid(str(path), grid)
    except ValueError as exc:
        raise _fail("ingest", exc)
    Manifest(out_dir, cfg, config_path).record("ingest", [path],
                                               time.perf_counter() - t0)
    click.echo(f"ingest: {len(result.records)} events "
               f"({result.n_rejected} rejected) -> {grid.n_slots} slots in {path}")


def _prepare_series(cfg: ExperimentConfig, grid, scale=None):
    """Cumulate, optionally super-resolve, and scale the series.

    With scale=None the bounds are fitted on the pre-test prefix; otherwise
    the given (min, max) is applied (predict-time path).
    """
    reg = cumulate(grid, cfg.period_slots)
    working = upsample_grid(reg) if cfg.superres else reg
    if scale is None:
        test_start = grid.n_slots - cfg.test_slots
        if test_start <= cfg.dependencies.min_slot:
            raise ValueError(
                f"series too short: test starts at slot {test_start} but lag "
                f"history begins at {cfg.dependencies.min_slot}")
        scale = fit_scale_bounds(working.frames[:test_start], cfg.scale_margin)
    scaled = scale_values(working, "apply", scale)
    return reg, scaled, scale


@main.command("train")
@config_option
@click.option("--grid", "grid_path", required=True, type=click.Path(),
              help="Binned tensor file from `gridcast ingest`.")
@out_option
@seed_option
@click.option("--variant", type=click.Choice(["conv", "per_cell"]), default=None)
@click.option("--superres/--no-superres", "superres", default=None,
              help="Train on 2x super-resolved frames.")
@click.option("--test-slots", type=int, default=None,
              help="Slots held out at the end of the series (default 336).")
def cmd_train(config_path, grid_path, out, seed, variant, superres, test_slots):
    """Train a model on everything before the held-out test range."""
    cfg = _load_config(config_path, seed=seed, variant=variant,
                       superres=superres, test_slots=test_slots)
    src = _require(grid_path, "grid tensor", "ingest")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        grid, _ = load_grid(str(src))
        reg, scaled, scale = _prepare_series(cfg, grid)
        from .pipeline import _external_spec
        ext = _external_spec(cfg, grid)
        dep = cfg.dependencies
        test_start = grid.n_slots - cfg.test_slots
        samples = build_dataset(scaled, dep, ext, (dep.min_slot, test_start))
        from .nn import NetworkConfig
        netcfg = NetworkConfig(rows=scaled.frame_shape[0], cols=scaled.frame_shape[1],
                               external_size=ext.vector_length,
                               len_nearby=dep.len_nearby, len_period=dep.len_period,
                               len_trend=dep.len_trend, seed=cfg.seed,
                               **cfg.network_options)
        model = train(samples, TrainConfig(seed=cfg.seed, **cfg.training_options),
                      netcfg)
        model.scale = scale
        ckpt = out_dir / "model.ckpt"
        save_checkpoint_file(model, str(ckpt))
        log_path = out_dir / "training_log.csv"
        with open(log_path, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["phase", "epoch", "train_loss", "val_loss"])
            for row in model.history:
                writer.writerow([row["phase"], row["epoch"], repr(row["train_loss"]),
                                 "" if row["val_loss"] is None else repr(row["val_loss"])])
    except ValueError as exc:
        raise _fail("train", exc)
    Manifest(out_dir, cfg, config_path).record("train", [ckpt, log_path],
                                               time.perf_counter() - t0)
    click.echo(f"train: {len(samples)} samples, {param_count(netcfg)} parameters "
               f"-> {ckpt}")


@main.command("predict")
@config_option
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path())
@click.option("--grid", "grid_path", required=True, type=click.Path(),
              help="Binned tensor file from `gridcast ingest`.")
@out_option
@seed_option
@click.option("--variant", type=click.Choice(["conv", "per_cell"]), default=None,
              help="Enforce that the checkpoint matches this variant.")
@click.option("--superres/--no-superres", "superres", default=None)
@click.option("--test-slots", type=int, default=None)
def cmd_predict(config_path, ckpt_path, grid_path, out, seed, variant, superres,
                test_slots):
    """Predict the held-out range and emit frame CSVs and PGM heatmaps."""
    cfg = _load_config(config_path, seed=seed, variant=variant,
                       superres=superres, test_slots=test_slots)
    ckpt = _require(ckpt_path, "checkpoint", "train")
    src = _require(grid_path, "grid tensor", "ingest")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        model = load_checkpoint_file(str(ckpt), expect_variant=variant)
        if model.scale is None:
            raise ValueError("checkpoint has no value scale; re-train it")
        grid, _ = load_grid(str(src))
        reg, scaled, _ = _prepare_series(cfg, grid, scale=model.scale)
        if scaled.frame_shape != (model.config.rows, model.config.cols):
            raise ValueError(
                f"series frames {scaled.frame_shape} do not match the checkpoint "
                f"grid {(model.config.rows, model.config.cols)}; check --superres")
        from .pipeline import _external_spec
        ext = _external_spec(cfg, grid)
        dep = cfg.dependencies
        test_start = grid.n_slots - cfg.test_slots
        if test_start < dep.min_slot:
            raise ValueError("test range starts before lag history is available")
        samples = build_dataset(scaled, dep, ext, (test_start, grid.n_slots))
        batch = SampleBatch.from_samples(samples, dtype=model.config.np_dtype)
        frames, clamped = predict_batch(model, batch, reg)
        from .ingest import IntensityGrid
        predictions = IntensityGrid(grid.slot_time(test_start), frames, grid.spec)
        truth = IntensityGrid(grid.slot_time(test_start),
                              grid.frames[test_start:], grid.spec)
        ppath = out_dir / "predictions.tensor"
        save_grid(str(ppath), predictions, kind="prediction_frames",
                  start_slot=test_start, clamp_count=clamped,
                  period_slots=cfg.period_slots, variant=model.config.variant,
                  n_parameters=param_count(model.config), seed=cfg.seed)
        run = ForecastRun(model=model, predictions=predictions, ground_truth=truth,
                          clamp_count=clamped, start_slot=test_start)
        written = write_report(out_dir, run, emit_frames=cfg.emit_frames)
    except ValueError as exc:
        raise _fail("predict", exc)
    Manifest(out_dir, cfg, config_path).record("predict", [ppath] + written,
                                               time.perf_counter() - t0)
    click.echo(f"predict: {predictions.n_slots} frames ({clamped} clamped cells) "
               f"-> {ppath}")


@main.command("evaluate")
@config_option
@click.option("--predictions", "pred_path", required=True, type=click.Path())
@click.option("--truth", "truth_path", required=True, type=click.Path(),
              help="Binned tensor file with the ground-truth counts.")
@out_option
@seed_option
def cmd_evaluate(config_path, pred_path, truth_path, out, seed):
    """Score predictions against ground truth and write metrics.json."""
    cfg = _load_config(config_path, seed=seed)
    ppath = _require(pred_path, "predictions file", "predict")
    tpath = _require(truth_path, "grid tensor", "ingest")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        predictions, header = load_grid(str(ppath), kind="prediction_frames")
        truth_grid, _ = load_grid(str(tpath))
        start = int(header["start_slot"])
        stop = start + predictions.n_slots
        if stop > truth_grid.n_slots:
            raise ValueError(
                f"predictions cover slots [{start}, {stop}) but the truth series "
                f"has only {truth_grid.n_slots}")
        truth = truth_grid.frames[start:stop]
        if truth.shape != predictions.frames.shape:
            raise ValueError(f"shape mismatch: truth {truth.shape} vs predictions "
                             f"{predictions.frames.shape}")
        period = int(header.get("period_slots", cfg.period_slots))
        baseline = None
        if start >= period:
            baseline = rmse(truth, truth_grid.frames[start - period:stop - period])
        report = MetricReport(
            rmse_test=rmse(truth, predictions.frames),
            top_n=mean_top_n(truth, predictions.frames, cfg.top_n),
            baseline_rmse_test=baseline,
            variant=header.get("variant"),
            param_count=header.get("n_parameters"),
            n_test=predictions.n_slots,
            clamp_count=int(header.get("clamp_count", 0)),
            seed=header.get("seed"),
        )
        mpath = out_dir / "metrics.json"
        write_metrics_json(mpath, report)
    except ValueError as exc:
        raise _fail("evaluate", exc)
    Manifest(out_dir, cfg, config_path).record("evaluate", [mpath],
                                               time.perf_counter() - t0)
    click.echo(f"evaluate: rmse_test={report.rmse_test:.4f} -> {mpath}")


@main.command("report")
@click.argument("run_dirs", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@click.option("--out", default=None, type=click.Path(dir_okay=False),
              help="Output markdown path (default: report.md in the first dir).")
def cmd_report(run_dirs, out):
    """Summarize one or more runs as a markdown comparison table."""
    rows = []
    for d in run_dirs:
        mpath = Path(d) / "metrics.json"
        if not mpath.exists():
            raise click.ClickException(
                f"report: no metrics.json in {d}; produce it with "
                f"`gridcast evaluate` first")
        metrics = json.loads(mpath.read_text(encoding="utf-8"))
        manifest_path = Path(d) / "manifest.json"
        seconds = None
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            entry = manifest.get("artifacts", {}).get("model.ckpt")
            seconds = entry.get("seconds") if entry else None
        rows.append((Path(d).name, metrics, seconds))

    def fmt(x, spec=".4f"):
        return format(x, spec) if isinstance(x, (int, float)) else "-"

    lines = ["# Forecast run comparison", ""]
    lines.append("| Run | Variant | Train RMSE | Test RMSE | Baseline | #Params | Train time (s) |")
    lines.append("|---|---|---|---|---|---|---|")
    for name, m, secs in rows:
        lines.append("| {} | {} | {} | {} | {} | {} | {} |".format(
            name, m.get("variant", "-"), fmt(m.get("rmse_train")),
            fmt(m.get("rmse_test")), fmt(m.get("baseline_rmse_test")),
            m.get("param_count", "-"), fmt(secs, ".1f") if secs is not None else "-"))
    lines.append("")
    all_ns = sorted({int(n) for _, m, _ in rows for n in m.get("top_n", {})})
    if all_ns:
        lines.append("| Run | " + " | ".join(f"Top-{n}" for n in all_ns) + " |")
        lines.append("|---|" + "---|" * len(all_ns))
        for name, m, _ in rows:
            cells = [fmt(m.get("top_n", {}).get(str(n))) for n in all_ns]
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        lines.append("")
    out_path = Path(out) if out else Path(run_dirs[0]) / "report.md"
    out_path.write_text("\n".join(lines), encoding="utf-8")
    click.echo(f"report: wrote {out_path}")


if __name__ == "__main__":
    main()
