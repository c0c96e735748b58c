"""Event ingestion: CSV parsing, spatio-temporal windowing, hourly grid binning."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Optional, TextIO, Union

import numpy as np

log = logging.getLogger(__name__)

# Window that holds >95% of the events in the reference deployment.
DEFAULT_WINDOW = (33.6927, 34.3837, -118.7051, -118.1157)

DEFAULT_COLUMNS = {"id": "id", "time": "start_time", "lat": "lat", "lon": "lon"}


def parse_timestamp(text: str, utc_offset_seconds: int = 0) -> float:
    """ISO-8601 string -> epoch seconds (UTC).

    Naive timestamps are interpreted as wall-clock times shifted from UTC by
    ``utc_offset_seconds``. A trailing 'Z' is accepted on all Python versions.
    """
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc).timestamp() - utc_offset_seconds
    return dt.timestamp()


def format_timestamp(epoch_seconds: float) -> str:
    dt = datetime.fromtimestamp(epoch_seconds, tz=timezone.utc)
    return dt.isoformat().replace("+00:00", "Z")


@dataclass(frozen=True)
class EventRecord:
    """One timestamped, geolocated event. Only the start time is kept."""

    id: str
    start_time: float  # epoch seconds, UTC
    latitude: float
    longitude: float


@dataclass(frozen=True)
class GridSpec:
    """Spatial window, lattice resolution and slot length of the working grid."""

    lat_min: float = DEFAULT_WINDOW[0]
    lat_max: float = DEFAULT_WINDOW[1]
    lon_min: float = DEFAULT_WINDOW[2]
    lon_max: float = DEFAULT_WINDOW[3]
    rows: int = 16
    cols: int = 16
    slot_seconds: int = 3600

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ValueError("grid window is empty or inverted")
        if self.rows < 2 or self.cols < 2:
            raise ValueError("grid needs at least 2 rows and 2 columns")
        if self.slot_seconds <= 0 or 86400 % self.slot_seconds != 0:
            raise ValueError("slot_seconds must be positive and divide 86400")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def cell_of(self, lat: float, lon: float) -> Optional[tuple[int, int]]:
        """Map a coordinate to its (row, col) cell, or None if outside the window.

        Cells are half-open [low, high) in both axes except at the top/right
        edge of the window, which is closed, so the cells partition the window.
        Row index grows with latitude, column index with longitude.
        """
        if not (self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max):
            return None
        r = int((lat - self.lat_min) / (self.lat_max - self.lat_min) * self.rows)
        c = int((lon - self.lon_min) / (self.lon_max - self.lon_min) * self.cols)
        return (min(r, self.rows - 1), min(c, self.cols - 1))

    def to_dict(self) -> dict:
        return {
            "lat_min": self.lat_min, "lat_max": self.lat_max,
            "lon_min": self.lon_min, "lon_max": self.lon_max,
            "rows": self.rows, "cols": self.cols,
            "slot_seconds": self.slot_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**{k: d[k] for k in (
            "lat_min", "lat_max", "lon_min", "lon_max", "rows", "cols", "slot_seconds")})


@dataclass
class IntensityGrid:
    """Time-indexed stack of H x W event-count frames.

    ``frames`` has shape (T, rows, cols). Counts produced by binning are
    integer-valued; predictions re-use this container with real values.
    """

    origin_time: float
    frames: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a (T, rows, cols) array with T >= 1")
        if self.frames.shape[1:] != self.spec.shape:
            raise ValueError(
                f"frame shape {self.frames.shape[1:]} does not match grid {self.spec.shape}")
        if np.any(self.frames < 0):
            raise ValueError("counts must be non-negative")
        if self.origin_time % self.spec.slot_seconds != 0:
            raise ValueError("origin_time must be aligned to a slot boundary")

    @property
    def n_slots(self) -> int:
        return self.frames.shape[0]

    def slot_time(self, t: int) -> float:
        return self.origin_time + t * self.spec.slot_seconds


@dataclass
class ParseResult:
    records: list[EventRecord]
    rejected: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)


def parse_events(
    source: Union[str, bytes, TextIO],
    columns: Optional[dict[str, str]] = None,
    utc_offset_seconds: int = 0,
) -> ParseResult:
    """Parse a header-first CSV of events.

    ``source`` is a path, raw bytes, or an open text stream. ``columns`` maps
    the logical fields id/time/lat/lon onto the file's column names. Rows with
    an unparseable timestamp or a non-numeric / out-of-range coordinate are
    rejected individually and reported with their 1-based line number.
    """
    cols = dict(DEFAULT_COLUMNS)
    if columns:
        cols.update(columns)

    if isinstance(source, bytes):
        stream: TextIO = io.StringIO(source.decode("utf-8"))
        close = False
    elif isinstance(source, str):
        stream = open(source, "r", encoding="utf-8", newline="")
        close = True
    else:
        stream = source
        close = False

    try:
        reader = csv.DictReader(stream)
        if reader.fieldnames is None:
            raise ValueError("empty event file: no header row")
        missing = [v for v in cols.values() if v not in reader.fieldnames]
        if missing:
            raise ValueError(f"event file is missing columns: {missing}")

        records: list[EventRecord] = []
        rejected: list[tuple[int, str]] = []
        for row in reader:
            line = reader.line_num
            try:
                ts = parse_timestamp(row[cols["time"]], utc_offset_seconds)
            except (ValueError, TypeError):
                rejected.append((line, f"malformed timestamp {row[cols['time']]!r}"))
                continue
            try:
                lat = float(row[cols["lat"]])
                lon = float(row[cols["lon"]])
            except (ValueError, TypeError):
                rejected.append((line, "non-numeric coordinate"))
                continue
            if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
                rejected.append((line, f"coordinate out of range ({lat}, {lon})"))
                continue
            records.append(EventRecord(str(row[cols["id"]]), ts, lat, lon))
        if rejected:
            log.info("parse_events: rejected %d of %d rows", len(rejected),
                     len(records) + len(rejected))
        return ParseResult(records, rejected)
    finally:
        if close:
            stream.close()


def write_events_csv(path: str, events: Iterable[EventRecord]) -> None:
    """Write events in the schema `parse_events` consumes by default."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "start_time", "lat", "lon"])
        for ev in events:
            writer.writerow([ev.id, format_timestamp(ev.start_time),
                             repr(ev.latitude), repr(ev.longitude)])


def bin_events(
    events: Iterable[EventRecord],
    spec: GridSpec,
    t_start: float,
    t_end: float,
) -> IntensityGrid:
    """Count events into (slot, row, col) cells over [t_start, t_end).

    Both bounds must be slot-aligned. Events outside the spatial window or the
    time range are dropped; the dropped count is logged, never an error.
    """
    if t_start % spec.slot_seconds != 0 or t_end % spec.slot_seconds != 0:
        raise ValueError("t_start and t_end must be aligned to slot boundaries")
    if not t_start < t_end:
        raise ValueError("t_start must precede t_end")
    n_slots = int(round((t_end - t_start) / spec.slot_seconds))
    if n_slots < 1:
        raise ValueError("time range spans zero slots")

    counts = np.zeros((n_slots, spec.rows, spec.cols), dtype=np.int64)
    dropped = 0
    for ev in events:
        if not (t_start <= ev.start_time < t_end):
            dropped += 1
            continue
        cell = spec.cell_of(ev.latitude, ev.longitude)
        if cell is None:
            dropped += 1
            continue
        k = int((ev.start_time - t_start) // spec.slot_seconds)
        counts[k, cell[0], cell[1]] += 1
    if dropped:
        log.info("bin_events: dropped %d events outside the window/range", dropped)
    return IntensityGrid(origin_time=float(t_start), frames=counts, spec=spec)
