"""One structured JSON config for the whole pipeline, with CLI overrides.

A config file may set any subset of the sections below; everything else takes
the defaults. The single top-level seed drives the generator, the network
initialization and the training shuffle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .features import DependencyConfig
from .ingest import DEFAULT_COLUMNS, GridSpec, parse_timestamp
from .synth import DEFAULT_START, Excitation, SynthConfig

DEFAULTS: dict = {
    "seed": 0,
    "grid": {
        "lat_min": 33.6927, "lat_max": 34.3837,
        "lon_min": -118.7051, "lon_max": -118.1157,
        "rows": 16, "cols": 16, "slot_seconds": 3600,
    },
    "synth": {
        "days": 180,
        "base_rate": 2.0,
        "hotspots": [],
        "diurnal_profile": None,
        "excitation": None,
        "coupling": None,
        "start_time": DEFAULT_START,
    },
    "ingest": {
        "columns": dict(DEFAULT_COLUMNS),
        "utc_offset_hours": 0.0,
    },
    "regularize": {
        "period_slots": 24,
        # super-resolution quadruples the training cost; off by default
        "superres": False,
        # widen the fitted value-scale bounds by this fraction of the range so
        # observed extremes map strictly inside (-1, 1), where tanh gradients live
        "scale_margin": 0.02,
    },
    "dependencies": {"len_nearby": 3, "len_period": 3, "len_trend": 3},
    "external": {
        "holidays": None,  # null -> US federal holidays of the covered years
        "use_hour_of_day": True,
        "use_day_of_week": True,
        "weather_file": None,
    },
    "network": {
        "variant": "conv",
        "channels_hidden": 32,
        "residual_units": 6,
        "external_hidden": 10,
        "dtype": "float32",
    },
    "training": {
        "cv_ratio": 0.1,
        "epochs_cv": 20,
        "epochs_finetune": 20,
        "lr": 0.0005,
        "batch_size": 32,
    },
    "evaluate": {
        "test_slots": 336,
        "top_n": [5, 10, 15, 20, 25],
        "emit_frames": True,
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = {}
    for key, base in defaults.items():
        if key in override and isinstance(base, dict) and isinstance(override[key], dict):
            out[key] = _merge(base, override[key], f"{path}{key}.")
        elif key in override:
            out[key] = override[key]
        else:
            out[key] = base
    unknown = set(override) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(path + k for k in unknown)}")
    return out


@dataclass
class ExperimentConfig:
    """Resolved pipeline configuration; `raw` is the canonical snapshot."""

    raw: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULTS)))

    @classmethod
    def load(cls, path: Optional[str] = None, **overrides) -> "ExperimentConfig":
        given = {}
        if path is not None:
            with open(path, "r", encoding="utf-8") as fh:
                given = json.load(fh)
        merged = _merge(DEFAULTS, given)
        cfg = cls(merged)
        cfg.apply_overrides(**overrides)
        return cfg

    def apply_overrides(self, seed: Optional[int] = None, variant: Optional[str] = None,
                        superres: Optional[bool] = None,
                        test_slots: Optional[int] = None) -> None:
        if seed is not None:
            self.raw["seed"] = int(seed)
        if variant is not None:
            self.raw["network"]["variant"] = variant
        if superres is not None:
            self.raw["regularize"]["superres"] = bool(superres)
        if test_slots is not None:
            self.raw["evaluate"]["test_slots"] = int(test_slots)

    # ---- section accessors ----------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def grid(self) -> GridSpec:
        return GridSpec.from_dict(self.raw["grid"])

    @property
    def synth(self) -> SynthConfig:
        s = self.raw["synth"]
        exc = s["excitation"]
        start = s["start_time"]
        return SynthConfig(
            grid=self.grid,
            days=int(s["days"]),
            base_rate=s["base_rate"],
            hotspots=tuple(tuple(h) for h in s["hotspots"]),
            diurnal_profile=s["diurnal_profile"],
            excitation=Excitation(**exc) if exc else None,
            coupling=s["coupling"],
            start_time=parse_timestamp(start) if isinstance(start, str) else float(start),
            seed=self.seed,
        )

    @property
    def columns(self) -> dict:
        return dict(self.raw["ingest"]["columns"])

    @property
    def utc_offset_seconds(self) -> int:
        return int(round(float(self.raw["ingest"]["utc_offset_hours"]) * 3600))

    @property
    def period_slots(self) -> int:
        return int(self.raw["regularize"]["period_slots"])

    @property
    def superres(self) -> bool:
        return bool(self.raw["regularize"]["superres"])

    @property
    def scale_margin(self) -> float:
        return float(self.raw["regularize"]["scale_margin"])

    @property
    def dependencies(self) -> DependencyConfig:
        d = self.raw["dependencies"]
        return DependencyConfig(len_nearby=int(d["len_nearby"]),
                                len_period=int(d["len_period"]),
                                len_trend=int(d["len_trend"]))

    @property
    def external_options(self) -> dict:
        return dict(self.raw["external"])

    @property
    def network_options(self) -> dict:
        return dict(self.raw["network"])

    @property
    def training_options(self) -> dict:
        return dict(self.raw["training"])

    @property
    def test_slots(self) -> int:
        return int(self.raw["evaluate"]["test_slots"])

    @property
    def top_n(self) -> list[int]:
        return [int(n) for n in self.raw["evaluate"]["top_n"]]

    @property
    def emit_frames(self) -> bool:
        return bool(self.raw["evaluate"]["emit_frames"])
