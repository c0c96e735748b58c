"""Temporal and spatial regularization of count grids.

Two transforms, each with an exact inverse:

* periodic cumulation: within every period of ``period_slots`` slots the
  counts are replaced by their running sum, which resets at each period start;
* 2x super-resolution: separable natural cubic-spline interpolation that
  keeps the original samples on the even lattice, so subsampling inverts it.

Plus an affine value scaling onto [-1, 1] for the bounded network output.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .ingest import GridSpec, IntensityGrid


@dataclass
class RegularizedGrid:
    """Cumulated and/or super-resolved frame stack with provenance flags."""

    frames: np.ndarray  # (T, H', W') float64
    period_slots: int = 24
    cumulated: bool = False
    upsampled: bool = False
    scale: Optional[tuple[float, float]] = None  # (min, max) when value-scaled
    origin_time: float = 0.0
    slot_seconds: int = 3600

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ValueError("frames must have shape (T, H, W)")
        if self.period_slots < 1:
            raise ValueError("period_slots must be positive")

    @property
    def n_slots(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]

    def slot_time(self, t: int) -> float:
        return self.origin_time + t * self.slot_seconds


def cumulate(grid: IntensityGrid, period_slots: int = 24) -> RegularizedGrid:
    """Per-cell running sums that reset at every period boundary.

    Requires the grid to cover whole periods and to start on a period
    boundary, so slot indices and period phases coincide.
    """
    T = grid.n_slots
    if T % period_slots != 0:
        raise ValueError(f"slot count {T} is not a multiple of the period {period_slots}")
    if grid.origin_time % (period_slots * grid.spec.slot_seconds) != 0:
        raise ValueError("grid origin is not aligned to a period boundary")
    h, w = grid.spec.shape
    stacked = grid.frames.reshape(T // period_slots, period_slots, h, w).astype(np.float64)
    cum = np.cumsum(stacked, axis=1).reshape(T, h, w)
    return RegularizedGrid(cum, period_slots=period_slots, cumulated=True,
                           origin_time=grid.origin_time, slot_seconds=grid.spec.slot_seconds)


def decumulate(reg: RegularizedGrid, spec: GridSpec) -> tuple[IntensityGrid, int]:
    """Invert `cumulate`: within-period differences, first slot passes through.

    True cumulants round-trip exactly. Network outputs may dip, which would
    produce negative counts; those are clamped to zero and counted, never an
    error. Returns (grid, clamp_count).
    """
    if not reg.cumulated:
        raise ValueError("decumulate needs a cumulated grid")
    if reg.upsampled:
        raise ValueError("downsample before decumulating")
    if reg.scale is not None:
        raise ValueError("invert the value scale before decumulating")
    T = reg.n_slots
    p = reg.period_slots
    if T % p != 0:
        raise ValueError(f"slot count {T} is not a multiple of the period {p}")
    h, w = reg.frame_shape
    stacked = reg.frames.reshape(T // p, p, h, w)
    diff = np.diff(stacked, axis=1, prepend=np.zeros((T // p, 1, h, w)))
    diff = diff.reshape(T, h, w)
    clamped = int(np.count_nonzero(diff < 0))
    if clamped:
        diff = np.maximum(diff, 0.0)
    grid = IntensityGrid(origin_time=reg.origin_time, frames=diff, spec=spec)
    return grid, clamped


@lru_cache(maxsize=32)
def _spline_matrix(n: int) -> np.ndarray:
    """(2n-1, n) operator taking n knot values to the refined lattice.

    Natural cubic-spline interpolation at fixed sample points is linear in the
    data, so it is a matrix; odd output rows are the midpoint weights, even
    rows are exact unit rows, which makes subsampling a bit-exact inverse.
    """
    if n < 4:
        raise ValueError("cubic spline interpolation needs at least 4 knots")
    spline = CubicSpline(np.arange(n), np.eye(n), axis=0, bc_type="natural")
    mid = spline(np.arange(n - 1) + 0.5)  # (n-1, n)
    m = np.zeros((2 * n - 1, n))
    m[0::2] = np.eye(n)
    m[1::2] = mid
    return m


def upsample2x(frame: np.ndarray) -> np.ndarray:
    """Separable natural cubic-spline refinement of one H x W frame.

    Output is (2H-1) x (2W-1) with the input preserved exactly at even
    indices; negative interpolants are clamped to 0 since intensities are
    counts. Rows-first equals columns-first because the 1-D operator is
    linear, so the order is immaterial.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("frame must be 2-D")
    h, w = frame.shape
    if h < 4 or w < 4:
        raise ValueError(f"frame {h}x{w} too small to upsample (need >= 4x4)")
    out = _spline_matrix(h) @ frame @ _spline_matrix(w).T
    return np.maximum(out, 0.0)


def downsample2x(frame: np.ndarray) -> np.ndarray:
    """Exact left-inverse of `upsample2x`: subsample the even lattice."""
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ValueError("frame must be 2-D")
    h, w = frame.shape
    if h % 2 == 0 or w % 2 == 0 or h < 7 or w < 7:
        raise ValueError(f"expected odd dimensions >= 7, got {h}x{w}")
    return frame[::2, ::2].copy()


def upsample_grid(reg: RegularizedGrid) -> RegularizedGrid:
    """Apply `upsample2x` across the time axis in one pass."""
    if reg.upsampled:
        raise ValueError("grid is already upsampled")
    T, h, w = reg.frames.shape
    if h < 4 or w < 4:
        raise ValueError(f"frames {h}x{w} too small to upsample (need >= 4x4)")
    mr, mc = _spline_matrix(h), _spline_matrix(w)
    out = np.einsum("ih,thw,jw->tij", mr, reg.frames, mc, optimize=True)
    return replace(reg, frames=np.maximum(out, 0.0), upsampled=True)


def downsample_grid(reg: RegularizedGrid) -> RegularizedGrid:
    if not reg.upsampled:
        raise ValueError("grid is not upsampled")
    T, h, w = reg.frames.shape
    if h % 2 == 0 or w % 2 == 0 or h < 7 or w < 7:
        raise ValueError(f"expected odd dimensions >= 7, got {h}x{w}")
    return replace(reg, frames=reg.frames[:, ::2, ::2].copy(), upsampled=False)


def scale_values(
    reg: RegularizedGrid,
    mode: str = "fit",
    bounds: Optional[tuple[float, float]] = None,
) -> RegularizedGrid:
    """Affine map of the frame values onto [-1, 1] and back.

    mode="fit" learns (min, max) from the given grid (training data only),
    mode="apply" uses explicit bounds, mode="invert" undoes a recorded scale.
    Out-of-range values at apply time map outside [-1, 1] and are not clamped.
    """
    if mode == "fit":
        lo = float(reg.frames.min())
        hi = float(reg.frames.max())
        if hi <= lo:
            raise ValueError("cannot fit a value scale to constant frames")
    elif mode == "apply":
        if bounds is None:
            raise ValueError("mode='apply' needs explicit (min, max) bounds")
        lo, hi = float(bounds[0]), float(bounds[1])
        if hi <= lo:
            raise ValueError("invalid scale bounds: max must exceed min")
    elif mode == "invert":
        if reg.scale is None:
            raise ValueError("grid has no recorded value scale to invert")
        lo, hi = reg.scale
        restored = (reg.frames + 1.0) * (hi - lo) / 2.0 + lo
        return replace(reg, frames=restored, scale=None)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    if reg.scale is not None:
        raise ValueError("grid is already value-scaled")
    scaled = 2.0 * (reg.frames - lo) / (hi - lo) - 1.0
    return replace(reg, frames=scaled, scale=(lo, hi))
