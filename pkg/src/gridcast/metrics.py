"""Forecast quality metrics: grid RMSE and top-N hotspot ranking accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

DEFAULT_TOP_N = (5, 10, 15, 20, 25)


def _frames(x) -> np.ndarray:
    arr = np.asarray(x.frames if hasattr(x, "frames") else x, dtype=np.float64)
    return arr


def rmse(exact, pred) -> float:
    """sqrt of the mean squared error over every cell and slot."""
    a, b = _frames(exact), _frames(pred)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def top_n_indices(frame: np.ndarray, n: int) -> np.ndarray:
    """Flat indices of the n largest cells; ties broken by ascending index."""
    flat = np.asarray(frame, dtype=np.float64).ravel()
    if n > flat.size:
        raise ValueError(f"top-{n} requested from only {flat.size} cells")
    return np.argsort(-flat, kind="stable")[:n]


def top_n_accuracy(exact_frame, pred_frame, n: int) -> float:
    """|top-n(exact) intersect top-n(pred)| / n."""
    a, b = _frames(exact_frame), _frames(pred_frame)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    truth = set(top_n_indices(a, n).tolist())
    picks = set(top_n_indices(b, n).tolist())
    return len(truth & picks) / n


def mean_top_n(exact, pred, ns: Iterable[int] = DEFAULT_TOP_N) -> dict[int, float]:
    """Per-slot top-n accuracy averaged over all slots, for each n."""
    a, b = _frames(exact), _frames(pred)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ns = list(ns)
    out = {n: 0.0 for n in ns}
    t = a.shape[0]
    for k in range(t):
        for n in ns:
            out[n] += top_n_accuracy(a[k], b[k], n)
    return {n: out[n] / t for n in ns}


@dataclass
class MetricReport:
    """The metrics block emitted as metrics.json."""

    rmse_test: float
    top_n: dict[int, float]
    rmse_train: Optional[float] = None
    rmse_val: Optional[float] = None
    baseline_rmse_test: Optional[float] = None
    param_count: Optional[int] = None
    variant: Optional[str] = None
    n_train: Optional[int] = None
    n_test: Optional[int] = None
    clamp_count: Optional[int] = None
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        d = {
            "rmse_test": self.rmse_test,
            "top_n": {str(k): v for k, v in sorted(self.top_n.items())},
        }
        for key in ("rmse_train", "rmse_val", "baseline_rmse_test", "param_count",
                    "variant", "n_train", "n_test", "clamp_count", "seed"):
            val = getattr(self, key)
            if val is not None:
                d[key] = val
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        return cls(
            rmse_test=d["rmse_test"],
            top_n={int(k): v for k, v in d["top_n"].items()},
            **{k: d.get(k) for k in (
                "rmse_train", "rmse_val", "baseline_rmse_test", "param_count",
                "variant", "n_train", "n_test", "clamp_count", "seed")},
        )
