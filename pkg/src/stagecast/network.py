"""River sensor network as a directed acyclic graph.

Edges point downstream (``up_id -> down_id``). Every sensor carries its water
travel time to the watershed outlet, so the travel time between a sensor and
any of its ancestors is a plain difference of outlet times.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Mapping, NamedTuple

from .errors import (
    CycleDetected,
    DataError,
    DuplicateSensor,
    MalformedRecord,
    MissingTimeDistance,
    NonMonotoneTimeDistance,
    NotUpstream,
    UnknownEdgeEndpoint,
    UnknownSensor,
)

DEFAULT_MIN_UPSTREAM = 4


class ParcelRef(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class Sensor:
    id: str
    td_outlet: float
    location: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True, eq=False)
class SensorGraph:
    """Validated, immutable sensor network. Build it with :func:`build_graph`."""

    sensors: Mapping[str, Sensor]
    edges: tuple[tuple[str, str], ...]
    parcel_watershed: Mapping[str, frozenset]
    parcel_td: Mapping[str, Mapping[ParcelRef, float]]
    _parents: Mapping[str, frozenset] = field(repr=False)
    _ancestors: Mapping[str, frozenset] = field(repr=False)
    _order: tuple[str, ...] = field(repr=False)

    def __contains__(self, sensor_id):
        return sensor_id in self.sensors

    def __len__(self):
        return len(self.sensors)

    def parents(self, s: str) -> frozenset:
        self._check(s)
        return self._parents[s]

    def ancestors(self, s: str) -> frozenset:
        self._check(s)
        return self._ancestors[s]

    def topological_order(self) -> tuple[str, ...]:
        """Sensor ids ordered upstream first."""
        return self._order

    def watershed(self, s: str) -> frozenset:
        self._check(s)
        return self.parcel_watershed.get(s, frozenset())

    def _check(self, s):
        if s not in self.sensors:
            raise UnknownSensor(f"unknown sensor {s!r}")


def build_graph(sensors: Iterable, edges: Iterable = (), parcels: Iterable = ()) -> SensorGraph:
    """Validate a network description and freeze it into a :class:`SensorGraph`.

    Args:
        sensors: :class:`Sensor` objects or ``(id, td_outlet[, x, y])`` tuples.
        edges: ``(up_id, down_id)`` pairs.
        parcels: ``(sensor_id, row, col, td_hours)`` records, one per parcel of
            each sensor's full watershed; ``td_hours`` is the parcel's travel
            time to that sensor.

    Raises:
        DuplicateSensor, UnknownEdgeEndpoint, CycleDetected,
        NonMonotoneTimeDistance, UnknownSensor
    """
    table: dict[str, Sensor] = {}
    for item in sensors:
        if not isinstance(item, Sensor):
            sid, td, *loc = item
            item = Sensor(str(sid), float(td), tuple(float(v) for v in loc) if loc else (0.0, 0.0))
        if not item.id:
            raise DataError("sensor id must be non-empty")
        if not math.isfinite(item.td_outlet) or item.td_outlet < 0:
            raise DataError(f"sensor {item.id!r}: td_outlet must be finite and >= 0")
        if item.id in table:
            raise DuplicateSensor(f"duplicate sensor {item.id!r}")
        table[item.id] = item

    edge_list = []
    parents: dict[str, set] = {sid: set() for sid in table}
    for up, down in edges:
        for end in (up, down):
            if end not in table:
                raise UnknownEdgeEndpoint(f"edge {up!r}->{down!r}: unknown sensor {end!r}")
        edge_list.append((up, down))
        parents[down].add(up)

    try:
        order = tuple(TopologicalSorter(parents).static_order())
    except CycleError as exc:
        raise CycleDetected(f"cycle through {exc.args[1]}") from None

    for up, down in edge_list:
        if not table[up].td_outlet > table[down].td_outlet:
            raise NonMonotoneTimeDistance(
                f"edge {up!r}->{down!r}: td_outlet {table[up].td_outlet} "
                f"does not exceed {table[down].td_outlet}"
            )

    ancestors: dict[str, frozenset] = {}
    for sid in order:  # parents come first
        acc = set(parents[sid])
        for p in parents[sid]:
            acc |= ancestors[p]
        ancestors[sid] = frozenset(acc)

    watershed: dict[str, set] = {}
    parcel_td: dict[str, dict] = {}
    for sid, row, col, td in parcels:
        if sid not in table:
            raise UnknownSensor(f"parcel record for unknown sensor {sid!r}")
        ref = ParcelRef(int(row), int(col))
        watershed.setdefault(sid, set()).add(ref)
        parcel_td.setdefault(sid, {})[ref] = float(td)

    return SensorGraph(
        sensors=dict(sorted(table.items())),
        edges=tuple(sorted(set(edge_list))),
        parcel_watershed={k: frozenset(v) for k, v in sorted(watershed.items())},
        parcel_td={k: dict(sorted(v.items())) for k, v in sorted(parcel_td.items())},
        _parents={k: frozenset(v) for k, v in parents.items()},
        _ancestors=ancestors,
        _order=order,
    )


def time_distance(graph: SensorGraph, u: str, s: str) -> float:
    """Travel time in hours from upstream sensor ``u`` down to ``s``."""
    if u not in graph.ancestors(s):
        raise NotUpstream(f"{u!r} is not upstream of {s!r}")
    return graph.sensors[u].td_outlet - graph.sensors[s].td_outlet


def upstream_of(graph: SensorGraph, s: str, k: int) -> list[str]:
    """The ``k`` ancestors of ``s`` closest in travel time (ties by id)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(graph.ancestors(s), key=lambda u: (time_distance(graph, u, s), u))
    return ranked[:k]


def usable_sensors(graph: SensorGraph, min_upstream: int = DEFAULT_MIN_UPSTREAM) -> list[str]:
    if min_upstream < 1:
        raise ValueError("min_upstream must be >= 1")
    return [sid for sid in graph.sensors if len(graph.ancestors(sid)) >= min_upstream]


def exclusive_watershed(graph: SensorGraph, s: str, upstreams: Iterable[str]) -> frozenset:
    """Parcels of ``s``'s watershed that drain to none of ``upstreams``."""
    area = set(graph.watershed(s))
    ancestors = graph.ancestors(s)
    for u in upstreams:
        if u not in ancestors:
            graph._check(u)
            raise NotUpstream(f"{u!r} is not upstream of {s!r}")
        area -= graph.watershed(u)
    return frozenset(area)


def bucket_parcels(
    graph: SensorGraph,
    s: str,
    parcels: Iterable[ParcelRef],
    parcel_td: Mapping[ParcelRef, float] | None = None,
) -> dict[int, frozenset]:
    """Group parcels into whole-hour travel-time buckets.

    A parcel ``td`` hours away lands in bucket ``ceil(td)``. Empty buckets are
    absent from the result. ``parcel_td`` defaults to the travel times stored
    on the graph for ``s``.
    """
    graph._check(s)
    if parcel_td is None:
        parcel_td = graph.parcel_td.get(s, {})
    buckets: dict[int, set] = {}
    for p in parcels:
        if p not in parcel_td:
            raise MissingTimeDistance(f"no time distance for parcel {tuple(p)} of {s!r}")
        td = parcel_td[p]
        if not td > 0:
            raise DataError(f"parcel {tuple(p)} of {s!r}: time distance must be > 0, got {td}")
        buckets.setdefault(math.ceil(td), set()).add(ParcelRef(*p))
    return {k: frozenset(v) for k, v in sorted(buckets.items())}


# --- graph spec file ------------------------------------------------------

_SECTIONS = ("sensors", "edges", "parcels")
_FIELDS = {"sensors": 4, "edges": 2, "parcels": 4}


def read_graph(stream) -> SensorGraph:
    """Parse the sectioned text format written by :func:`write_graph`."""
    if isinstance(stream, (str, bytes)) or hasattr(stream, "__fspath__"):
        with open(stream, encoding="utf-8") as fh:
            return read_graph(fh)
    records: dict[str, list] = {name: [] for name in _SECTIONS}
    section = None
    for lineno, raw in enumerate(stream, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in records:
                raise MalformedRecord(f"unknown section [{section}]", lineno)
            continue
        if section is None:
            raise MalformedRecord("record outside of a section", lineno)
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != _FIELDS[section]:
            raise MalformedRecord(f"expected {_FIELDS[section]} fields in [{section}]", lineno)
        try:
            if section == "sensors":
                records[section].append(
                    Sensor(parts[0], float(parts[1]), (float(parts[2]), float(parts[3])))
                )
            elif section == "edges":
                records[section].append((parts[0], parts[1]))
            else:
                records[section].append((parts[0], int(parts[1]), int(parts[2]), float(parts[3])))
        except ValueError as exc:
            raise MalformedRecord(str(exc), lineno) from None
    return build_graph(records["sensors"], records["edges"], records["parcels"])


def write_graph(graph: SensorGraph, stream=None):
    """Write ``graph`` in canonical form; returns the text when ``stream`` is None."""
    out = io.StringIO() if stream is None else stream
    out.write("# stagecast sensor graph\n[sensors]\n# id,td_outlet_hours,x,y\n")
    for s in graph.sensors.values():
        out.write(f"{s.id},{s.td_outlet!r},{s.location[0]!r},{s.location[1]!r}\n")
    out.write("[edges]\n# up_id,down_id\n")
    for up, down in graph.edges:
        out.write(f"{up},{down}\n")
    out.write("[parcels]\n# sensor_id,row,col,td_hours\n")
    for sid, table in graph.parcel_td.items():
        for ref, td in table.items():
            out.write(f"{sid},{ref.row},{ref.col},{td!r}\n")
    if stream is None:
        return out.getvalue()
    return None
