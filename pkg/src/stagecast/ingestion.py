"""Stage and precipitation file formats and time-indexed lookups.

Instants are handled internally as integer minutes since the Unix epoch (UTC).
Public helpers accept and return timezone-aware ``datetime`` objects.

Stage file (``STAGECAST-STAGE v1``)::

    STAGECAST-STAGE v1
    # sensor_id,timestamp,utc_offset_minutes,height_feet
    S1,2009-01-01T06:00,-360,3.2

``timestamp`` is local wall time; UTC is ``timestamp - utc_offset_minutes``.

Precipitation file (``STAGECAST-PRECIP v1``)::

    STAGECAST-PRECIP v1
    2 3
    t=2009-01-01T00:00:00Z
    0.0 0.5 1.0
    0.0 0.0 2.5

Values are mm/h, one frame per UTC hour, rows listed top to bottom.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .errors import MalformedRecord, NegativeRainfall, NonAlignedTimestamp, ParcelOutOfBounds, ShapeMismatch

logger = logging.getLogger(__name__)

STAGE_MAGIC = "STAGECAST-STAGE v1"
PRECIP_MAGIC = "STAGECAST-PRECIP v1"

STEP_MINUTES = 15
HOUR = 60
MAX_GAP_MINUTES = 120

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def to_minutes(t) -> int:
    """UTC ``datetime`` (naive values are taken as UTC) to epoch minutes."""
    if isinstance(t, (int, np.integer)):
        return int(t)
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    delta = t - _EPOCH
    if delta.seconds % 60 or delta.microseconds:
        raise NonAlignedTimestamp(f"{t.isoformat()} is not on a whole minute")
    return delta.days * 1440 + delta.seconds // 60


def from_minutes(m: int) -> datetime:
    return _EPOCH + timedelta(minutes=int(m))


def format_utc(m: int) -> str:
    return from_minutes(m).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_utc(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    t = datetime.fromisoformat(text)
    return to_minutes(t)


def _open_text(stream):
    if isinstance(stream, str) or hasattr(stream, "__fspath__"):
        return open(stream, encoding="utf-8")
    return None


# --- stage series ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StageSeries:
    """Gage heights per sensor, keyed by 15-minute aligned UTC instants.

    ``data[sensor] = (times, heights)`` with ``times`` sorted epoch minutes.
    """

    data: dict = field(default_factory=dict)
    duplicates: int = 0

    @classmethod
    def from_mapping(cls, table, duplicates=0):
        """Build from ``{sensor: {instant: height}}`` (instants as datetimes or epoch minutes)."""
        data = {}
        for sid in sorted(table):
            items = sorted((to_minutes(t), float(v)) for t, v in table[sid].items())
            times = np.array([t for t, _ in items], dtype=np.int64)
            heights = np.array([v for _, v in items], dtype=np.float64)
            if np.any(times % STEP_MINUTES):
                raise NonAlignedTimestamp(f"sensor {sid!r} has samples off the 15-minute grid")
            if not np.all(np.isfinite(heights)):
                raise MalformedRecord(f"sensor {sid!r} has non-finite heights")
            data[sid] = (times, heights)
        return cls(data, duplicates)

    @property
    def sensors(self):
        return list(self.data)

    def as_dict(self, s):
        """One sensor's samples as ``{datetime: height}``."""
        times, heights = self.data.get(s, ((), ()))
        return {from_minutes(t): float(v) for t, v in zip(times, heights)}

    def __len__(self):
        return sum(len(t) for t, _ in self.data.values())


def parse_stage_file(stream) -> StageSeries:
    """Read a stage CSV, normalizing every record to UTC.

    Duplicate ``(sensor, instant)`` records keep the last value; their count is
    logged and stored in ``StageSeries.duplicates``.
    """
    fh = _open_text(stream)
    if fh is not None:
        with fh:
            return parse_stage_file(fh)
    table: dict[str, dict[int, float]] = {}
    duplicates = 0
    seen_magic = False
    for lineno, raw in enumerate(stream, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not seen_magic:
            if line != STAGE_MAGIC:
                raise MalformedRecord(f"expected {STAGE_MAGIC!r} header", lineno)
            seen_magic = True
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise MalformedRecord("expected sensor_id,timestamp,utc_offset_minutes,height_feet", lineno)
        sid, stamp, offset, height = (p.strip() for p in parts)
        if not sid:
            raise MalformedRecord("empty sensor id", lineno)
        try:
            local = datetime.fromisoformat(stamp)
            offset_min = int(offset)
            value = float(height)
        except ValueError as exc:
            raise MalformedRecord(str(exc), lineno) from None
        if local.tzinfo is not None:
            raise MalformedRecord("timestamp must be local wall time without a zone", lineno)
        if not math.isfinite(value):
            raise MalformedRecord(f"non-finite height {height!r}", lineno)
        try:
            minute = to_minutes(local) - offset_min
        except NonAlignedTimestamp as exc:
            raise NonAlignedTimestamp(str(exc), lineno) from None
        if minute % STEP_MINUTES:
            raise NonAlignedTimestamp(f"{stamp} (offset {offset_min}) is off the 15-minute grid", lineno)
        row = table.setdefault(sid, {})
        if minute in row:
            duplicates += 1
        row[minute] = value
    if not seen_magic:
        raise MalformedRecord(f"missing {STAGE_MAGIC!r} header")
    if duplicates:
        logger.warning("stage file: %d duplicate records replaced by later ones", duplicates)
    return StageSeries.from_mapping(table, duplicates)


def write_stage_file(series: StageSeries, stream=None):
    """Canonical stage file: UTC wall times (offset 0), sorted by sensor then time."""
    out = io.StringIO() if stream is None else stream
    out.write(STAGE_MAGIC + "\n")
    for sid, (times, heights) in series.data.items():
        for t, v in zip(times.tolist(), heights.tolist()):
            out.write(f"{sid},{from_minutes(t).strftime('%Y-%m-%dT%H:%M')},0,{v!r}\n")
    if stream is None:
        return out.getvalue()
    return None


def stage_lookup(series: StageSeries, s: str, minutes) -> np.ndarray:
    """Vectorized stage lookup with the gap policy; NaN marks Missing.

    An exact sample wins. Otherwise the value is interpolated linearly between
    the nearest samples on either side, provided both lie within two hours of
    the query. Anything else is Missing.
    """
    q = np.asarray(minutes, dtype=np.int64)
    out = np.full(q.shape, np.nan)
    if s not in series.data:
        return out
    times, heights = series.data[s]
    if len(times) == 0:
        return out
    idx = np.searchsorted(times, q)
    right = np.minimum(idx, len(times) - 1)
    exact = times[right] == q
    out[exact] = heights[right[exact]]

    left = idx - 1
    ok = ~exact & (idx > 0) & (idx < len(times))
    li, ri = left[ok], idx[ok]
    t0, t1, qq = times[li], times[ri], q[ok]
    near = (qq - t0 <= MAX_GAP_MINUTES) & (t1 - qq <= MAX_GAP_MINUTES)
    frac = (qq - t0) / (t1 - t0)
    vals = heights[li] + frac * (heights[ri] - heights[li])
    fill = np.where(near, vals, np.nan)
    out[ok] = fill
    return out


def stage_at(series: StageSeries, s: str, t) -> float | None:
    """Stage at a 15-minute aligned instant, or None when Missing."""
    m = to_minutes(t)
    if m % STEP_MINUTES:
        raise NonAlignedTimestamp(f"{format_utc(m)} is off the 15-minute grid")
    v = float(stage_lookup(series, s, [m])[0])
    return None if math.isnan(v) else v


def stage_at_hour(series: StageSeries, s: str, t) -> float | None:
    """Hourly stage sample at ``t`` (an hour boundary), or None when Missing."""
    m = to_minutes(t)
    if m % HOUR:
        raise NonAlignedTimestamp(f"{format_utc(m)} is not on an hour boundary")
    return stage_at(series, s, m)


# --- precipitation grids --------------------------------------------------


@dataclass(frozen=True, eq=False)
class PrecipFieldSeries:
    """Hourly rainfall grids (mm/h). ``frames[i]`` belongs to hour ``hours[i]``."""

    shape: tuple[int, int]
    hours: np.ndarray
    frames: np.ndarray

    @classmethod
    def from_frames(cls, shape, frames_by_time):
        rows, cols = int(shape[0]), int(shape[1])
        items = sorted((to_minutes(t), np.asarray(f, dtype=np.float64)) for t, f in frames_by_time.items())
        hours = np.array([t for t, _ in items], dtype=np.int64)
        if np.any(hours % HOUR):
            raise NonAlignedTimestamp("precipitation frames must sit on hour boundaries")
        stack = np.empty((len(items), rows, cols))
        for i, (_, f) in enumerate(items):
            if f.shape != (rows, cols):
                raise ShapeMismatch(f"frame shape {f.shape} != {(rows, cols)}")
            stack[i] = f
        _check_rain(stack)
        return cls((rows, cols), hours, stack)

    def __len__(self):
        return len(self.hours)

    def frame_index(self, minutes) -> np.ndarray:
        """Index of the frame covering each instant (floored to its hour); -1 if absent."""
        q = np.asarray(minutes, dtype=np.int64)
        hour = q - np.mod(q, HOUR)
        if len(self.hours) == 0:
            return np.full(q.shape, -1, dtype=np.int64)
        idx = np.minimum(np.searchsorted(self.hours, hour), len(self.hours) - 1)
        return np.where(self.hours[idx] == hour, idx, -1)

    def check_parcel(self, p):
        r, c = p
        if not (0 <= r < self.shape[0] and 0 <= c < self.shape[1]):
            raise ParcelOutOfBounds(f"parcel {(r, c)} outside grid {self.shape}")


def _check_rain(stack):
    if not np.all(np.isfinite(stack)):
        raise MalformedRecord("non-finite rainfall value")
    if np.any(stack < 0):
        raise NegativeRainfall("rainfall must be non-negative")


def precip_at(series: PrecipFieldSeries, p, t) -> float | None:
    """Rainfall for parcel ``p`` in the frame of hour ``t``; None if no frame."""
    series.check_parcel(p)
    i = int(series.frame_index([to_minutes(t)])[0])
    if i < 0:
        return None
    return float(series.frames[i, p[0], p[1]])


def parse_precip_file(stream) -> PrecipFieldSeries:
    fh = _open_text(stream)
    if fh is not None:
        with fh:
            return parse_precip_file(fh)
    lines = [
        (n, raw.strip())
        for n, raw in enumerate(stream, 1)
        if raw.strip() and not raw.lstrip().startswith("#")
    ]
    if not lines or lines[0][1] != PRECIP_MAGIC:
        raise MalformedRecord(f"expected {PRECIP_MAGIC!r} header", lines[0][0] if lines else None)
    if len(lines) < 2:
        raise MalformedRecord("missing 'rows cols' header")
    n, head = lines[1]
    try:
        rows, cols = (int(v) for v in head.split())
    except ValueError:
        raise MalformedRecord("expected 'rows cols'", n) from None
    if rows < 1 or cols < 1:
        raise ShapeMismatch(f"grid shape must be positive, got {rows}x{cols}")

    hours, frames = [], []
    i = 2
    while i < len(lines):
        n, line = lines[i]
        if not line.startswith("t="):
            raise MalformedRecord("expected frame header 't=<ISO8601Z>'", n)
        try:
            minute = parse_utc(line[2:])
        except ValueError as exc:
            raise MalformedRecord(str(exc), n) from None
        if minute % HOUR:
            raise NonAlignedTimestamp(f"frame {line[2:]} is not on an hour boundary", n)
        if hours and minute <= hours[-1]:
            raise MalformedRecord("frames must be strictly increasing in time", n)
        body = lines[i + 1 : i + 1 + rows]
        if len(body) < rows or any(b.startswith("t=") for _, b in body):
            raise ShapeMismatch(f"line {n}: frame has fewer than {rows} rows")
        grid = np.empty((rows, cols))
        for r, (bn, text) in enumerate(body):
            try:
                vals = [float(v) for v in text.split()]
            except ValueError as exc:
                raise MalformedRecord(str(exc), bn) from None
            if len(vals) != cols:
                raise ShapeMismatch(f"line {bn}: expected {cols} values, got {len(vals)}")
            grid[r] = vals
        hours.append(minute)
        frames.append(grid)
        i += 1 + rows

    stack = np.array(frames).reshape(len(frames), rows, cols)
    _check_rain(stack)
    return PrecipFieldSeries((rows, cols), np.array(hours, dtype=np.int64), stack)


def write_precip_file(series: PrecipFieldSeries, stream=None):
    out = io.StringIO() if stream is None else stream
    out.write(f"{PRECIP_MAGIC}\n{series.shape[0]} {series.shape[1]}\n")
    for t, frame in zip(series.hours.tolist(), series.frames):
        out.write(f"t={format_utc(t)}\n")
        for row in frame.tolist():
            out.write(" ".join(repr(v) for v in row) + "\n")
    if stream is None:
        return out.getvalue()
    return None
