"""Seeded synthetic river worlds with known generative law.

A world is a random tree of sensors draining to one outlet, a rainfall grid
driven by circular storms, and stage series produced by routing that rain.

Hourly law for sensor ``s`` at hour ``h`` (hours counted from the world start)::

    local(s, h)   = mean over p in local catchment of s of rain(p, h - ceil(td_p))
    anomaly(s, h) = gain * sum_{k=1..R} K[k-1] * local(s, h - k)
                    + attenuation * sum_{u parent of s} anomaly(u, h - lag(u, s))
    stage(s, h)   = baseflow + anomaly(s, h)

``td_p`` is the parcel's travel time to ``s``, ``lag(u, s)`` the whole-hour
travel time between the sensors and ``K`` a triangular unit response over
``R = response_hours`` hours. Rain before the first frame is zero. The
15-minute series interpolates linearly between consecutive hourly values.

The local catchment of ``s`` is its watershed minus the watersheds of its
direct upstream neighbours. Randomness comes from numpy's Philox
counter-based generator, so a seed gives the same world on every platform.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidConfig, OutOfRange
from .ingestion import (
    HOUR,
    STEP_MINUTES,
    PrecipFieldSeries,
    StageSeries,
    parse_utc,
    to_minutes,
    write_precip_file,
    write_stage_file,
)
from .network import Sensor, SensorGraph, build_graph, write_graph


def unit_response(hours: int) -> np.ndarray:
    """Triangular weights for lags 1..hours, summing to 1 (6 -> [1,2,3,3,2,1]/12)."""
    k = np.arange(1, hours + 1)
    w = np.minimum(k, hours + 1 - k).astype(np.float64)
    return w / w.sum()


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 1
    n_sensors: int = 8
    grid: tuple = (20, 20)
    start: str = "2009-01-01T00:00:00Z"
    days: int = 30
    storm_rate: float = 0.8  # storms per day
    storm_intensity: float = 8.0  # mean peak rainfall, mm/h
    storm_hours: tuple = (2, 10)
    storm_radius: tuple = (0.15, 0.4)  # fraction of the larger grid side
    lag_hours: tuple = (2, 6)  # travel time per edge
    response_hours: int = 6  # length of the triangular unit response
    parcel_hours_per_cell: float = 0.6
    baseflow: float = 2.0  # feet
    gain: float = 0.3  # feet per mm/h
    attenuation: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        object.__setattr__(self, "storm_hours", tuple(int(v) for v in self.storm_hours))
        object.__setattr__(self, "storm_radius", tuple(float(v) for v in self.storm_radius))
        object.__setattr__(self, "lag_hours", tuple(int(v) for v in self.lag_hours))

    def validate(self):
        problems = []
        if self.n_sensors < 5:
            problems.append("n_sensors must be >= 5")
        if len(self.grid) != 2 or min(self.grid) < 1:
            problems.append("grid needs two positive sides")
        elif self.grid[0] * self.grid[1] < self.n_sensors:
            problems.append("grid has fewer cells than sensors")
        if self.response_hours < 1:
            problems.append("response_hours must be >= 1")
        if self.days < 1:
            problems.append("days must be >= 1")
        if self.storm_rate < 0:
            problems.append("storm_rate must be >= 0")
        for name in ("storm_intensity", "parcel_hours_per_cell", "baseflow", "gain"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if not 0 < self.attenuation < 1:
            problems.append("attenuation must lie in (0, 1)")
        lo, hi = self.lag_hours
        if not 1 <= lo <= hi:
            problems.append("lag_hours must satisfy 1 <= min <= max")
        lo, hi = self.storm_hours
        if not 1 <= lo <= hi:
            problems.append("storm_hours must satisfy 1 <= min <= max")
        lo, hi = self.storm_radius
        if not 0 < lo <= hi:
            problems.append("storm_radius must satisfy 0 < min <= max")
        try:
            start = parse_utc(self.start)
        except ValueError:
            problems.append(f"start {self.start!r} is not an ISO-8601 UTC time")
        else:
            if start % HOUR:
                problems.append("start must be on an hour boundary")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown world config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class World:
    config: WorldConfig
    graph: SensorGraph
    precip: PrecipFieldSeries
    stage: StageSeries
    hourly: dict = field(default_factory=dict)  # sensor -> hourly stage array

    @property
    def start(self) -> int:
        return parse_utc(self.config.start)

    @property
    def n_hours(self) -> int:
        return self.config.days * 24


# --- generation ------------------------------------------------------------


def _make_tree(cfg, rng):
    rows, cols = cfg.grid
    n = cfg.n_sensors
    ids = [f"S{i:02d}" for i in range(n)]
    parent = [-1]
    td = [0.0]
    loc = [(rows - 1, cols // 2)]
    taken = {loc[0]}
    step = max(1, min(rows, cols) // 4)
    for i in range(1, n):
        p = int(rng.integers(0, i))
        for _ in range(200):
            dr = -int(rng.integers(1, step + 1))
            dc = int(rng.integers(-step, step + 1))
            r = min(max(loc[p][0] + dr, 0), rows - 1)
            c = min(max(loc[p][1] + dc, 0), cols - 1)
            if (r, c) not in taken:
                break
        else:
            free = [(r, c) for r in range(rows) for c in range(cols) if (r, c) not in taken]
            r, c = free[int(rng.integers(0, len(free)))]
        taken.add((r, c))
        parent.append(p)
        lo, hi = cfg.lag_hours
        td.append(td[p] + int(rng.integers(lo, hi + 1)))
        loc.append((r, c))
    return ids, parent, td, loc


def _local_catchments(cfg, loc):
    """Nearest-sensor partition of the grid plus each parcel's local travel time."""
    rows, cols = cfg.grid
    rr, cc = np.mgrid[0:rows, 0:cols]
    pts = np.array(loc, dtype=np.float64)
    dist = np.sqrt((rr[..., None] - pts[:, 0]) ** 2 + (cc[..., None] - pts[:, 1]) ** 2)
    owner = np.argmin(dist, axis=-1)
    local_td = 0.5 + cfg.parcel_hours_per_cell * np.take_along_axis(dist, owner[..., None], -1)[..., 0]
    return owner, local_td


def _storms(cfg, rng, n_hours):
    rows, cols = cfg.grid
    rain = np.zeros((n_hours, rows, cols))
    count = int(rng.poisson(cfg.storm_rate * cfg.days))
    rr, cc = np.mgrid[0:rows, 0:cols]
    side = max(rows, cols)
    for _ in range(count):
        start = int(rng.integers(0, n_hours))
        length = int(rng.integers(cfg.storm_hours[0], cfg.storm_hours[1] + 1))
        r0, c0 = rng.uniform(0, rows), rng.uniform(0, cols)
        radius = rng.uniform(*cfg.storm_radius) * side
        peak = rng.exponential(cfg.storm_intensity)
        footprint = peak * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * radius**2))
        rain[start : start + length] += footprint
    return rain


def gen_world(cfg: WorldConfig) -> World:
    """Build graph, rainfall and stage series for ``cfg``; deterministic per seed."""
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    ids, parent, td, loc = _make_tree(cfg, rng)
    owner, local_td = _local_catchments(cfg, loc)

    sensors = [Sensor(ids[i], float(td[i]), (float(loc[i][1]), float(loc[i][0]))) for i in range(len(ids))]
    edges = [(ids[i], ids[parent[i]]) for i in range(1, len(ids))]
    chain = []  # (sensor, downstream-or-self) pairs: up's local catchment drains to down
    for i in range(len(ids)):
        j = i
        while j != -1:
            chain.append((i, j))
            j = parent[j]
    parcels = []
    for up, down in sorted(chain, key=lambda pair: (pair[1], pair[0])):
        rs, cs = np.nonzero(owner == up)
        for r, c in zip(rs.tolist(), cs.tolist()):
            parcels.append((ids[down], r, c, float(local_td[r, c] + td[up] - td[down])))
    graph = build_graph(sensors, edges, parcels)

    n_hours = cfg.days * 24
    rain = _storms(cfg, rng, n_hours)
    start = parse_utc(cfg.start)
    precip = PrecipFieldSeries(cfg.grid, start + HOUR * np.arange(n_hours, dtype=np.int64), rain)
    hourly = route_stages(graph, precip, cfg)
    return World(cfg, graph, precip, _quarter_hourly(hourly, start), hourly)


def local_catchment(graph: SensorGraph, s: str) -> list:
    area = set(graph.watershed(s))
    for u in graph.parents(s):
        area -= graph.watershed(u)
    return sorted(area)


def route_stages(graph: SensorGraph, precip: PrecipFieldSeries, cfg: WorldConfig) -> dict:
    """Hourly stage arrays per sensor, aligned with ``precip.hours``."""
    n = len(precip)
    anomaly = {}
    for s in graph.topological_order():
        cells = local_catchment(graph, s)
        inflow = np.zeros(n)
        if cells:
            for p in cells:
                d = math.ceil(graph.parcel_td[s][p])
                if d < n:
                    inflow[d:] += precip.frames[: n - d, p[0], p[1]]
            inflow /= len(cells)
        a = np.zeros(n)
        for k, w in enumerate(unit_response(cfg.response_hours), 1):
            a[k:] += cfg.gain * w * inflow[: n - k]
        for u in sorted(graph.parents(s)):
            lag = int(round(graph.sensors[u].td_outlet - graph.sensors[s].td_outlet))
            if lag < n:
                a[lag:] += cfg.attenuation * anomaly[u][: n - lag]
        anomaly[s] = a
    return {s: cfg.baseflow + anomaly[s] for s in sorted(anomaly)}


def _quarter_hourly(hourly: dict, start: int) -> StageSeries:
    data = {}
    for s, L in hourly.items():
        q = np.arange(4 * (len(L) - 1) + 1)
        h, frac = q // 4, (q % 4) / 4.0
        nxt = np.minimum(h + 1, len(L) - 1)
        vals = L[h] + frac * (L[nxt] - L[h])
        data[s] = (start + STEP_MINUTES * q.astype(np.int64), vals)
    return StageSeries(data)


# --- direct recomputation ---------------------------------------------------


def world_oracle(world: World, s: str, t) -> np.ndarray:
    """The 24 hourly stages ``t .. t + 23h`` recomputed straight from the law.

    Works from the graph and rainfall frames alone, one term at a time, and
    shares no code with :func:`route_stages`.
    """
    m = to_minutes(t)
    start = world.start
    last = start + HOUR * (world.n_hours - 1)
    if m % STEP_MINUTES or m < start or m + 23 * HOUR > last:
        raise OutOfRange("oracle instant outside the world's time span")
    cfg, graph, precip = world.config, world.graph, world.precip
    n = world.n_hours
    catchments = {u: local_catchment(graph, u) for u in graph.sensors}
    weights = unit_response(cfg.response_hours).tolist()

    @lru_cache(maxsize=None)
    def anomaly(sensor, h):
        if h < 0:
            return 0.0
        total = 0.0
        cells = catchments[sensor]
        for k in range(1, len(weights) + 1):
            acc = 0.0
            for p in cells:
                j = h - k - math.ceil(graph.parcel_td[sensor][p])
                if 0 <= j < n:
                    acc += precip.frames[j, p[0], p[1]]
            if cells:
                total += cfg.gain * weights[k - 1] * acc / len(cells)
        for u in graph.parents(sensor):
            lag = graph.sensors[u].td_outlet - graph.sensors[sensor].td_outlet
            total += cfg.attenuation * anomaly(u, h - int(round(lag)))
        return total

    def stage(minute):
        q, rem = divmod(minute - start, HOUR)
        lo = cfg.baseflow + anomaly(s, q)
        if rem == 0:
            return lo
        hi = cfg.baseflow + anomaly(s, q + 1)
        return lo + (rem / HOUR) * (hi - lo)

    return np.array([stage(m + HOUR * k) for k in range(24)])


# --- files -----------------------------------------------------------------

WORLD_FILES = {"graph": "graph.txt", "stage": "stage.csv", "precip": "precip.txt", "config": "world.json"}


def write_world(world: World, out_dir) -> dict:
    """Write graph, stage, precipitation and config files; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, v) for k, v in WORLD_FILES.items()}
    with open(paths["graph"], "w", encoding="utf-8", newline="\n") as fh:
        write_graph(world.graph, fh)
    with open(paths["stage"], "w", encoding="utf-8", newline="\n") as fh:
        write_stage_file(world.stage, fh)
    with open(paths["precip"], "w", encoding="utf-8", newline="\n") as fh:
        write_precip_file(world.precip, fh)
    with open(paths["config"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(world.config.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return paths
