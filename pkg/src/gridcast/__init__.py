"""Hourly crime-intensity forecasting on a spatial grid.

Pipeline: bin point events into an hourly lattice, regularize (periodic
cumulation, optional cubic-spline 2x super-resolution, value scaling), train
a multi-branch residual network (convolutional or per-cell), invert the
transforms, and score with RMSE and top-N hotspot accuracy.
"""

__version__ = "0.1.0"

from . import features, ingest, metrics, nn, pipeline, regularize, synth
from .features import DependencyConfig, ExternalSpec, FeatureSample, build_dataset, build_sample, external_vector
from .ingest import EventRecord, GridSpec, IntensityGrid, bin_events, parse_events
from .metrics import MetricReport, mean_top_n, rmse, top_n_accuracy
from .nn import Model, NetworkConfig, adam_step, forward, load_checkpoint, param_count, save_checkpoint
from .pipeline import ForecastRun, TrainConfig, persistence_baseline, predict, run_experiment, train
from .regularize import RegularizedGrid, cumulate, decumulate, downsample2x, scale_values, upsample2x
from .runconfig import ExperimentConfig
from .synth import Excitation, SynthConfig, generate, true_intensity
