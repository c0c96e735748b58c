"""The three-step forecasting protocol.

1. regularize the binned counts (periodic cumulation, optional 2x spline
   super-resolution, value scaling onto [-1, 1]),
2. train/predict in the regularized space,
3. invert the chain (unscale, subsample, difference against the known
   cumulant history) to get real crime-intensity frames.

Training holds out the chronological tail as a validation split, restores the
best-validation weights, then fine-tunes on everything.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .features import (DependencyConfig, ExternalSpec, FeatureSample, SampleBatch,
                       build_dataset, us_federal_holidays)
from .ingest import EventRecord, GridSpec, IntensityGrid, bin_events
from .metrics import DEFAULT_TOP_N, MetricReport, mean_top_n, rmse
from .nn import Model, NetworkConfig, adam_step, param_count
from .regularize import RegularizedGrid, cumulate, scale_values, upsample_grid
from .runconfig import ExperimentConfig
from .synth import SynthConfig, generate
from .tensorfile import canonical_json

log = logging.getLogger(__name__)

PREDICT_CHUNK = 128


@dataclass(frozen=True)
class TrainConfig:
    cv_ratio: float = 0.1
    epochs_cv: int = 20
    epochs_finetune: int = 20
    lr: float = 0.0005
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.cv_ratio < 1.0:
            raise ValueError("cv_ratio must lie strictly between 0 and 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class ForecastRun:
    model: Model
    predictions: IntensityGrid
    ground_truth: IntensityGrid
    clamp_count: int
    timing: dict[str, float] = field(default_factory=dict)
    report: Optional[MetricReport] = None
    start_slot: int = 0  # index of the first predicted slot in the source series


def fit_scale_bounds(frames: np.ndarray, margin: float = 0.0) -> tuple[float, float]:
    """Value-scale bounds from training frames, widened by `margin` x range.

    A small margin keeps the observed extremes strictly inside (-1, 1); the
    bounded output activation can then match them with finite pre-activations.
    """
    lo = float(frames.min())
    hi = float(frames.max())
    if hi <= lo:
        raise ValueError("training frames are constant; cannot fit a value scale")
    pad = margin * (hi - lo)
    return lo - pad, hi + pad


def _batches(indices: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]
    # batch norm cannot digest a stray batch of one; fold it into its neighbor
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _eval_loss(model: Model, batch: SampleBatch) -> float:
    total = 0.0
    n = len(batch)
    for i in range(0, n, PREDICT_CHUNK):
        part = batch.take(slice(i, i + PREDICT_CHUNK))
        pred = model.forward_batch(part, train=False)
        model._cache = None
        target = part.target.astype(pred.dtype)
        total += float(np.sum((pred - target) ** 2))
    return total / (n * batch.target.shape[1] * batch.target.shape[2])


def train(samples: Sequence[FeatureSample], cfg: TrainConfig,
          netcfg: NetworkConfig) -> Model:
    """Two-phase training; deterministic under a fixed seed.

    Phase one trains on the chronological head and evaluates on the tail
    (fraction cv_ratio) after every epoch; the best-validation weights are
    restored. Phase two fine-tunes on the full training set.
    """
    n = len(samples)
    if n < 2:
        raise ValueError("training needs at least 2 samples")
    n_val = max(1, int(round(cfg.cv_ratio * n)))
    n_fit = n - n_val
    if n_fit < 1:
        raise ValueError("validation split leaves no training samples")

    data = SampleBatch.from_samples(list(samples), dtype=netcfg.np_dtype)
    fit = data.take(slice(0, n_fit))
    val = data.take(slice(n_fit, n))

    model = Model(netcfg)
    rng = np.random.default_rng(cfg.seed)
    best_val = np.inf
    best_snap = None

    def run_epoch(batch: SampleBatch) -> float:
        order = rng.permutation(len(batch))
        total, count = 0.0, 0
        for chunk in _batches(order, cfg.batch_size):
            loss, grads = model.loss_and_grads(batch.take(chunk), train=True)
            adam_step(model, grads, cfg.lr)
            total += loss * len(chunk)
            count += len(chunk)
        return total / count

    for epoch in range(cfg.epochs_cv):
        train_loss = run_epoch(fit)
        val_loss = _eval_loss(model, val)
        model.history.append({"phase": "cv", "epoch": epoch,
                              "train_loss": train_loss, "val_loss": val_loss})
        log.info("cv epoch %d: train %.6g val %.6g", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_snap = model.snapshot()
    if best_snap is not None:
        model.restore(best_snap)

    for epoch in range(cfg.epochs_finetune):
        train_loss = run_epoch(data)
        model.history.append({"phase": "finetune", "epoch": epoch,
                              "train_loss": train_loss, "val_loss": None})
        log.info("finetune epoch %d: train %.6g", epoch, train_loss)
    return model


class PredictResult(tuple):
    """(frame, clamp_count) with attribute access."""

    def __new__(cls, frame: np.ndarray, clamp_count: int):
        return super().__new__(cls, (frame, clamp_count))

    frame = property(lambda self: self[0])
    clamp_count = property(lambda self: self[1])


def _invert_chain(pred_scaled: np.ndarray, target_indices: np.ndarray,
                  context: RegularizedGrid, scale: tuple[float, float]
                  ) -> tuple[np.ndarray, int]:
    """Scaled network outputs -> non-negative intensity frames.

    `context` holds the true cumulants at original resolution; predictions at
    a period's first slot pass through, all others subtract the previous
    slot's cumulant. Negative intensities are clamped to zero and counted.
    """
    lo, hi = scale
    cum = (pred_scaled.astype(np.float64) + 1.0) * (hi - lo) / 2.0 + lo
    oh, ow = context.frame_shape
    if cum.shape[1:] != (oh, ow):
        if cum.shape[1:] != (2 * oh - 1, 2 * ow - 1):
            raise ValueError(
                f"prediction frames {cum.shape[1:]} match neither the context "
                f"{(oh, ow)} nor its 2x refinement")
        cum = cum[:, ::2, ::2]
    period = context.period_slots
    prev = np.zeros_like(cum)
    inside = (target_indices % period) != 0
    prev[inside] = context.frames[target_indices[inside] - 1]
    intensity = cum - prev
    clamped = int(np.count_nonzero(intensity < 0))
    return np.maximum(intensity, 0.0), clamped


def predict(model: Model, sample: FeatureSample,
            context: RegularizedGrid) -> PredictResult:
    """One inverse-mapped intensity frame for a single sample."""
    if model.scale is None:
        raise ValueError("model has no recorded value scale; train first")
    if not context.cumulated or context.upsampled or context.scale is not None:
        raise ValueError("context must be the cumulated, unscaled, original-"
                         "resolution series")
    batch = SampleBatch.from_samples([sample], dtype=model.config.np_dtype)
    pred = model.forward_batch(batch, train=False)
    model._cache = None
    frames, clamped = _invert_chain(pred, np.array([sample.target_index]),
                                    context, model.scale)
    return PredictResult(frames[0], clamped)


def predict_batch(model: Model, batch: SampleBatch,
                  context: RegularizedGrid) -> tuple[np.ndarray, int]:
    """Vectorized `predict` over a SampleBatch; returns (frames, clamp_count)."""
    if model.scale is None:
        raise ValueError("model has no recorded value scale; train first")
    preds = []
    for i in range(0, len(batch), PREDICT_CHUNK):
        part = batch.take(slice(i, i + PREDICT_CHUNK))
        preds.append(model.forward_batch(part, train=False))
        model._cache = None
    return _invert_chain(np.concatenate(preds), batch.target_index, context,
                         model.scale)


def persistence_baseline(series: IntensityGrid, t: int, period_slots: int = 24
                         ) -> np.ndarray:
    """The frame one period earlier: same hour, previous day."""
    if t < period_slots:
        raise ValueError(f"slot {t} has no frame {period_slots} slots earlier")
    return np.asarray(series.frames[t - period_slots], dtype=np.float64)


# ---- end-to-end experiment ----------------------------------------------


def run_experiment(source: Union[SynthConfig, list, IntensityGrid],
                   config: ExperimentConfig,
                   out_dir: Optional[Union[str, Path]] = None) -> ForecastRun:
    """ingest/generate -> regularize -> features -> train -> predict -> metrics.

    `source` is a SynthConfig, a list of EventRecords, or an already-binned
    IntensityGrid. Writes the report files into `out_dir` when given. Every
    stage error is re-raised with the stage name prefixed.
    """
    timing: dict[str, float] = {}

    def stage(name):
        class _Stage:
            def __enter__(self_inner):
                self_inner.t0 = time.perf_counter()

            def __exit__(self_inner, exc_type, exc, tb):
                timing[name] = time.perf_counter() - self_inner.t0
                if exc is not None:
                    log.error("stage %s failed: %s", name, exc)
                    raise RuntimeError(f"stage {name!r} failed: {exc}") from exc
        return _Stage()

    grid_spec = config.grid

    with stage("ingest"):
        if isinstance(source, SynthConfig):
            t_synth = time.perf_counter()
            events = generate(source)
            timing["synth"] = time.perf_counter() - t_synth
            grid = bin_events(events, grid_spec, source.start_time,
                              source.start_time + source.horizon_seconds)
        elif isinstance(source, IntensityGrid):
            grid = source
            grid_spec = source.spec
        else:
            events = list(source)
            if not events:
                raise ValueError("no events to bin")
            t0 = min(e.start_time for e in events)
            t1 = max(e.start_time for e in events)
            pseconds = config.period_slots * grid_spec.slot_seconds
            t0 = (int(t0) // pseconds) * pseconds
            t1 = -(-int(t1 + 1) // pseconds) * pseconds
            grid = bin_events(events, grid_spec, t0, t1)

    dep = config.dependencies
    test_slots = config.test_slots
    test_start = grid.n_slots - test_slots
    if test_start <= dep.min_slot:
        raise RuntimeError(
            f"stage 'features' failed: series too short: test would start at slot "
            f"{test_start} but lag history begins at {dep.min_slot}")

    with stage("regularize"):
        reg = cumulate(grid, config.period_slots)
        working = upsample_grid(reg) if config.superres else reg
        lo, hi = fit_scale_bounds(working.frames[:test_start], config.scale_margin)
        scaled = scale_values(working, "apply", (lo, hi))

    with stage("features"):
        ext = _external_spec(config, grid)
        samples = build_dataset(scaled, dep, ext, (dep.min_slot, grid.n_slots))
        train_samples = [s for s in samples if s.target_index < test_start]
        test_samples = [s for s in samples if s.target_index >= test_start]

    with stage("train"):
        netopts = config.network_options
        netcfg = NetworkConfig(
            rows=scaled.frame_shape[0], cols=scaled.frame_shape[1],
            external_size=ext.vector_length,
            len_nearby=dep.len_nearby, len_period=dep.len_period,
            len_trend=dep.len_trend, seed=config.seed, **netopts)
        traincfg = TrainConfig(seed=config.seed, **config.training_options)
        model = train(train_samples, traincfg, netcfg)
        model.scale = (lo, hi)

    with stage("predict"):
        test_batch = SampleBatch.from_samples(test_samples, dtype=netcfg.np_dtype)
        pred_frames, clamped = predict_batch(model, test_batch, reg)
        predictions = IntensityGrid(grid.slot_time(test_start), pred_frames, grid_spec)
        truth = IntensityGrid(grid.slot_time(test_start),
                              grid.frames[test_start:], grid_spec)

    with stage("evaluate"):
        report = _evaluate(model, grid, reg, samples, train_samples, traincfg,
                           predictions, truth, test_start, config, clamped, netcfg)

    run = ForecastRun(model=model, predictions=predictions, ground_truth=truth,
                      clamp_count=clamped, timing=timing, report=report,
                      start_slot=test_start)
    if out_dir is not None:
        with stage("emit"):
            write_report(Path(out_dir), run, emit_frames=config.emit_frames)
    return run


def _external_spec(config: ExperimentConfig, grid: IntensityGrid) -> ExternalSpec:
    opts = config.external_options
    holidays = opts["holidays"]
    if holidays is None:
        y0 = datetime.fromtimestamp(grid.origin_time, tz=timezone.utc).year
        y1 = datetime.fromtimestamp(grid.slot_time(grid.n_slots), tz=timezone.utc).year
        dates: set = set()
        for year in range(y0, y1 + 1):
            dates |= us_federal_holidays(year)
        holidays = sorted(d.isoformat() for d in dates)
    return ExternalSpec.from_config(
        holidays=holidays,
        use_hour_of_day=opts["use_hour_of_day"],
        use_day_of_week=opts["use_day_of_week"],
        weather_file=opts["weather_file"])


def _evaluate(model, grid, reg, samples, train_samples, traincfg, predictions,
              truth, test_start, config, clamped, netcfg) -> MetricReport:
    n_train = len(train_samples)
    n_val = max(1, int(round(traincfg.cv_ratio * n_train)))
    n_fit = n_train - n_val

    train_batch = SampleBatch.from_samples(train_samples, dtype=netcfg.np_dtype)
    train_pred, _ = predict_batch(model, train_batch, reg)
    first = train_samples[0].target_index
    train_truth = np.asarray(grid.frames[first:test_start], dtype=np.float64)
    rmse_train = rmse(train_truth[:n_fit], train_pred[:n_fit])
    rmse_val = rmse(train_truth[n_fit:], train_pred[n_fit:])

    rmse_test = rmse(truth, predictions)
    top = mean_top_n(truth, predictions, config.top_n)

    baseline = None
    if test_start >= config.period_slots:
        base_frames = grid.frames[test_start - config.period_slots:
                                  grid.n_slots - config.period_slots]
        baseline = rmse(truth.frames, base_frames)

    return MetricReport(
        rmse_test=rmse_test, top_n=top, rmse_train=rmse_train, rmse_val=rmse_val,
        baseline_rmse_test=baseline, param_count=param_count(model.config),
        variant=model.config.variant, n_train=n_train,
        n_test=predictions.n_slots, clamp_count=clamped, seed=config.seed)


# ---- report emission ------------------------------------------------------


def write_metrics_json(path: Path, report: MetricReport) -> None:
    path.write_text(canonical_json(report.to_dict()) + "\n", encoding="utf-8")


def write_frame_csv(path: Path, frame: np.ndarray) -> None:
    rows = [",".join(f"{v:.10g}" for v in row) for row in np.asarray(frame)]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def write_heatmap_pgm(path: Path, truth_frame: np.ndarray,
                      pred_frame: np.ndarray) -> None:
    """Truth and prediction side by side, jointly max-scaled to 8 bits."""
    t = np.asarray(truth_frame, dtype=np.float64)
    p = np.asarray(pred_frame, dtype=np.float64)
    peak = max(t.max(), p.max(), 1e-12)
    img = np.concatenate([t, np.zeros((t.shape[0], 1)), p], axis=1)
    data = np.round(255.0 * img / peak).clip(0, 255).astype(np.uint8)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + data.tobytes())


def write_report(out_dir: Path, run: ForecastRun, emit_frames: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if run.report is not None:
        mpath = out_dir / "metrics.json"
        write_metrics_json(mpath, run.report)
        written.append(mpath)
    if emit_frames:
        for i in range(run.predictions.n_slots):
            slot = run.start_slot + i
            p = out_dir / f"pred_{slot}.csv"
            t = out_dir / f"truth_{slot}.csv"
            h = out_dir / f"heatmap_{slot}.pgm"
            write_frame_csv(p, run.predictions.frames[i])
            write_frame_csv(t, run.ground_truth.frames[i])
            write_heatmap_pgm(h, run.ground_truth.frames[i], run.predictions.frames[i])
            written.extend([p, t, h])
    return written
