"""Compile (input, output) training pairs for stage forecasting.

For a sensor ``S`` and an instant ``t`` an entry holds

* the height vector: for each of the 4 nearest upstream sensors, its hourly
  stages ending at ``t - td`` (``td`` being its travel time to ``S`` rounded
  to the hour), followed by ``S``'s own stages at ``t - self_hours ... t - 1``;
* the precipitation vector: slot ``k`` is the mean rainfall at ``t - k`` over
  the exclusive-watershed parcels that are ``k`` hours away from ``S``;
* the output vector: ``S``'s stages at ``t, t + 1h, ..., t + 23h``.

Everything is oldest-first except the precipitation slots, which run from the
nearest bucket outwards.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import struct
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import CorruptDataset, DegenerateSplit, EmptyRange, InsufficientUpstream, NonAlignedTimestamp
from .ingestion import HOUR, STEP_MINUTES, PrecipFieldSeries, StageSeries, from_minutes, stage_lookup, to_minutes
from .network import (
    DEFAULT_MIN_UPSTREAM,
    SensorGraph,
    bucket_parcels,
    exclusive_watershed,
    time_distance,
    upstream_of,
    usable_sensors,
)

OUTPUT_LEN = 24
DATASET_MAGIC = b"STAGECAST-DS v1\n"

MISSING_STAGE = "MissingStage"
MISSING_PRECIP = "MissingPrecip"
MISSING_OUTPUT = "MissingOutput"


@dataclass(frozen=True)
class DatasetVariant:
    name: str
    upstream_hours: int
    self_hours: int
    precip_len: int
    n_upstream: int = DEFAULT_MIN_UPSTREAM
    output_len: int = OUTPUT_LEN

    @property
    def height_len(self) -> int:
        return self.n_upstream * self.upstream_hours + self.self_hours

    @property
    def input_len(self) -> int:
        return self.height_len + self.precip_len


SMALLER = DatasetVariant("smaller", upstream_hours=4, self_hours=3, precip_len=20)
LARGER = DatasetVariant("larger", upstream_hours=24, self_hours=24, precip_len=40)
VARIANTS = {v.name: v for v in (SMALLER, LARGER)}


def get_variant(name) -> DatasetVariant:
    if isinstance(name, DatasetVariant):
        return name
    try:
        return VARIANTS[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown dataset variant {name!r}; expected one of {sorted(VARIANTS)}") from None


def round_hours(td: float) -> int:
    """Nearest whole hour, halves rounded up."""
    return int(math.floor(td + 0.5))


@dataclass(frozen=True)
class DatasetEntry:
    sensor: str
    t: int  # epoch minutes, UTC
    input: np.ndarray
    output: np.ndarray

    @property
    def time(self):
        return from_minutes(self.t)


class Skipped(NamedTuple):
    sensor: str
    t: int
    reason: str


@dataclass(eq=False)
class Dataset:
    """Entries stored column-wise; ``X`` and ``y`` feed the estimators directly."""

    variant: DatasetVariant
    sensors: list = field(default_factory=list)
    times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    X: np.ndarray = None
    y: np.ndarray = None

    def __post_init__(self):
        n = len(self.sensors)
        if self.X is None:
            self.X = np.zeros((n, self.variant.input_len))
        if self.y is None:
            self.y = np.zeros((n, self.variant.output_len))
        self.times = np.asarray(self.times, dtype=np.int64)
        if self.X.shape != (n, self.variant.input_len) or self.y.shape != (n, self.variant.output_len):
            raise ValueError("dataset arrays do not match the variant shape")

    def __len__(self):
        return len(self.sensors)

    def __getitem__(self, i) -> DatasetEntry:
        return DatasetEntry(self.sensors[i], int(self.times[i]), self.X[i], self.y[i])

    @property
    def entries(self):
        return [self[i] for i in range(len(self))]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.variant,
            [self.sensors[i] for i in idx],
            self.times[idx],
            self.X[idx],
            self.y[idx],
        )

    def sort(self) -> "Dataset":
        order = sorted(range(len(self)), key=lambda i: (self.sensors[i], int(self.times[i])))
        return self.subset(order)

    @classmethod
    def from_entries(cls, variant, entries):
        entries = list(entries)
        X = np.array([e.input for e in entries], dtype=np.float64).reshape(len(entries), variant.input_len)
        y = np.array([e.output for e in entries], dtype=np.float64).reshape(len(entries), variant.output_len)
        return cls(variant, [e.sensor for e in entries], [e.t for e in entries], X, y)


@dataclass
class SkipReport:
    skipped: list = field(default_factory=list)
    attempted: int = 0

    @property
    def counts(self) -> dict:
        return dict(sorted(Counter(s.reason for s in self.skipped).items()))

    def to_csv(self, stream=None):
        out = io.StringIO() if stream is None else stream
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["sensor", "t", "reason"])
        for s in self.skipped:
            writer.writerow([s.sensor, from_minutes(s.t).strftime("%Y-%m-%dT%H:%M:%SZ"), s.reason])
        if stream is None:
            return out.getvalue()
        return None


# --- per-sensor plan --------------------------------------------------------


@dataclass(frozen=True)
class SensorPlan:
    """Everything about one sensor that does not depend on ``t``."""

    sensor: str
    upstreams: tuple
    lags: tuple  # whole-hour travel time of each upstream
    buckets: dict


def plan_sensor(graph: SensorGraph, s: str, n_upstream: int = DEFAULT_MIN_UPSTREAM) -> SensorPlan:
    ups = upstream_of(graph, s, n_upstream)
    if len(ups) < n_upstream:
        raise InsufficientUpstream(f"{s!r} has {len(ups)} upstream sensors, needs {n_upstream}")
    lags = tuple(round_hours(time_distance(graph, u, s)) for u in ups)
    parcels = exclusive_watershed(graph, s, ups)
    return SensorPlan(s, tuple(ups), lags, bucket_parcels(graph, s, parcels))


def _height_block(stage, plan, times, variant) -> np.ndarray:
    times = np.asarray(times, dtype=np.int64)
    cols = []
    uh = variant.upstream_hours
    for u, lag in zip(plan.upstreams, plan.lags):
        offsets = -HOUR * (lag + np.arange(uh - 1, -1, -1))
        cols.append(stage_lookup(stage, u, times[:, None] + offsets[None, :]))
    offsets = -HOUR * np.arange(variant.self_hours, 0, -1)
    cols.append(stage_lookup(stage, plan.sensor, times[:, None] + offsets[None, :]))
    return np.concatenate(cols, axis=1)


def _bucket_means(precip: PrecipFieldSeries, buckets: dict, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame mean rainfall of each kept bucket, plus a mask of non-empty slots."""
    means = np.zeros((len(precip), length))
    used = np.zeros(length, dtype=bool)
    for k, parcels in buckets.items():
        if not 1 <= k <= length:
            continue  # cropped: farther than the vector reaches
        cells = sorted(parcels)
        for p in cells:
            precip.check_parcel(p)
        rows = np.array([p[0] for p in cells])
        cols = np.array([p[1] for p in cells])
        means[:, k - 1] = precip.frames[:, rows, cols].mean(axis=1)
        used[k - 1] = True
    return means, used


def _precip_block(precip, buckets, times, length) -> np.ndarray:
    times = np.asarray(times, dtype=np.int64)
    means, used = _bucket_means(precip, buckets, length)
    out = np.zeros((len(times), length))
    for k in np.flatnonzero(used) + 1:
        idx = precip.frame_index(times - HOUR * k)
        col = np.full(len(times), np.nan)
        hit = idx >= 0
        col[hit] = means[idx[hit], k - 1]
        out[:, k - 1] = col
    return out


def _output_block(stage, s, times) -> np.ndarray:
    times = np.asarray(times, dtype=np.int64)
    return stage_lookup(stage, s, times[:, None] + HOUR * np.arange(OUTPUT_LEN)[None, :])


def _one(block):
    row = block[0]
    return None if np.isnan(row).any() else row


# --- single-entry builders --------------------------------------------------


def build_height_vector(stage: StageSeries, graph: SensorGraph, s: str, t, variant) -> np.ndarray | None:
    """Upstream and self stage history for ``(s, t)``; None when any slot is Missing."""
    variant = get_variant(variant)
    plan = plan_sensor(graph, s, variant.n_upstream)
    return _one(_height_block(stage, plan, [to_minutes(t)], variant))


def build_precip_vector(precip: PrecipFieldSeries, buckets: dict, t, length: int) -> np.ndarray | None:
    """Mean rainfall per travel-time bucket; bucket ``k`` is read at ``t - k`` hours.

    Empty buckets give 0 and buckets beyond ``length`` are dropped.
    """
    return _one(_precip_block(precip, buckets, [to_minutes(t)], length))


def build_output_vector(stage: StageSeries, s: str, t) -> np.ndarray | None:
    return _one(_output_block(stage, s, [to_minutes(t)]))


def build_entry(sensor, t, height, precip, output):
    """Concatenate the parts into a :class:`DatasetEntry`, or explain the skip."""
    t = to_minutes(t)
    if height is None:
        return Skipped(sensor, t, MISSING_STAGE)
    if precip is None:
        return Skipped(sensor, t, MISSING_PRECIP)
    if output is None:
        return Skipped(sensor, t, MISSING_OUTPUT)
    return DatasetEntry(sensor, t, np.concatenate([height, precip]), np.asarray(output, dtype=np.float64))


# --- whole dataset ----------------------------------------------------------


def _build_sensor(args):
    graph, stage, precip, variant, s, times = args
    plan = plan_sensor(graph, s, variant.n_upstream)
    H = _height_block(stage, plan, times, variant)
    P = _precip_block(precip, plan.buckets, times, variant.precip_len)
    O = _output_block(stage, s, times)
    bad_h = np.isnan(H).any(axis=1)
    bad_p = np.isnan(P).any(axis=1)
    bad_o = np.isnan(O).any(axis=1)
    keep = ~(bad_h | bad_p | bad_o)
    skipped = []
    for i in np.flatnonzero(~keep):
        reason = MISSING_STAGE if bad_h[i] else MISSING_PRECIP if bad_p[i] else MISSING_OUTPUT
        skipped.append(Skipped(s, int(times[i]), reason))
    X = np.concatenate([H[keep], P[keep]], axis=1)
    return s, times[keep], X, O[keep], skipped


def instants(t_start, t_end, step_minutes: int = STEP_MINUTES) -> np.ndarray:
    """Half-open ``[t_start, t_end)`` grid of epoch minutes."""
    a, b = to_minutes(t_start), to_minutes(t_end)
    if not a < b:
        raise EmptyRange(f"empty range {from_minutes(a)} .. {from_minutes(b)}")
    if a % STEP_MINUTES or step_minutes % STEP_MINUTES:
        raise NonAlignedTimestamp("range start and step must sit on the 15-minute grid")
    return np.arange(a, b, step_minutes, dtype=np.int64)


def build_dataset(
    graph: SensorGraph,
    stage: StageSeries,
    precip: PrecipFieldSeries,
    variant,
    t_start,
    t_end,
    step_minutes: int = STEP_MINUTES,
    sensors=None,
    workers: int = 1,
) -> tuple[Dataset, SkipReport]:
    """One attempted entry per usable sensor per instant of ``[t_start, t_end)``.

    The result does not depend on ``workers``: sensors are processed
    independently and merged in sorted order.
    """
    variant = get_variant(variant)
    times = instants(t_start, t_end, step_minutes)
    if sensors is None:
        sensors = usable_sensors(graph, variant.n_upstream)
    jobs = [(graph, stage, precip, variant, s, times) for s in sorted(sensors)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_build_sensor, jobs))
    else:
        parts = [_build_sensor(j) for j in jobs]

    names, ts, Xs, Ys = [], [], [], []
    report = SkipReport(attempted=len(times) * len(jobs))
    for s, kept, X, Y, skipped in parts:
        names.extend([s] * len(kept))
        ts.append(kept)
        Xs.append(X)
        Ys.append(Y)
        report.skipped.extend(skipped)
    if parts:
        data = Dataset(variant, names, np.concatenate(ts), np.concatenate(Xs), np.concatenate(Ys))
    else:
        data = Dataset(variant)
    return data, report


def split(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0, mode: str = "random"):
    """Partition into ``(train, test)`` with ``round(train_fraction * N)`` training entries.

    ``mode="random"`` shuffles with a seeded generator first; ``"chronological"``
    puts the earliest instants in the training part. Both parts come back
    sorted by ``(sensor, t)``.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise DegenerateSplit(f"split of {n} entries at {train_fraction} leaves one side empty")
    if mode == "random":
        order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    elif mode == "chronological":
        order = np.array(sorted(range(n), key=lambda i: (int(dataset.times[i]), dataset.sensors[i])))
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return dataset.subset(order[:n_train]).sort(), dataset.subset(order[n_train:]).sort()


# --- binary file ----------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def dumps_dataset(dataset: Dataset) -> bytes:
    v = dataset.variant
    body = io.BytesIO()
    body.write(DATASET_MAGIC)
    body.write(_pack_str(v.name))
    body.write(struct.pack("<QII", len(dataset), v.input_len, v.output_len))
    X = dataset.X.astype("<f8", copy=False)
    y = dataset.y.astype("<f8", copy=False)
    for i in range(len(dataset)):
        body.write(_pack_str(dataset.sensors[i]))
        body.write(struct.pack("<q", int(dataset.times[i])))
        body.write(X[i].tobytes())
        body.write(y[i].tobytes())
    payload = body.getvalue()
    return payload + hashlib.sha256(payload).digest()


def loads_dataset(blob: bytes) -> Dataset:
    if len(blob) < len(DATASET_MAGIC) + 32 or not blob.startswith(DATASET_MAGIC):
        raise CorruptDataset("not a STAGECAST-DS v1 file")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptDataset("checksum mismatch (truncated or modified file)")
    view = memoryview(payload)
    pos = len(DATASET_MAGIC)
    try:
        (n,) = struct.unpack_from("<H", view, pos)
        name = bytes(view[pos + 2 : pos + 2 + n]).decode("utf-8")
        pos += 2 + n
        count, in_len, out_len = struct.unpack_from("<QII", view, pos)
        pos += 16
        variant = get_variant(name)
        if (in_len, out_len) != (variant.input_len, variant.output_len):
            raise CorruptDataset("header lengths disagree with the variant")
        sensors, times = [], np.empty(count, dtype=np.int64)
        X, y = np.empty((count, in_len)), np.empty((count, out_len))
        for i in range(count):
            (n,) = struct.unpack_from("<H", view, pos)
            sensors.append(bytes(view[pos + 2 : pos + 2 + n]).decode("utf-8"))
            pos += 2 + n
            (times[i],) = struct.unpack_from("<q", view, pos)
            pos += 8
            X[i] = np.frombuffer(view, "<f8", in_len, pos)
            pos += 8 * in_len
            y[i] = np.frombuffer(view, "<f8", out_len, pos)
            pos += 8 * out_len
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptDataset(f"malformed dataset body: {exc}") from None
    if pos != len(payload):
        raise CorruptDataset("trailing bytes after the last entry")
    return Dataset(variant, sensors, times, X, y)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(dataset))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())
