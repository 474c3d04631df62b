from datetime import datetime, timezone

import numpy as np
import pytest

from stagecast.ingestion import HOUR, PrecipFieldSeries, StageSeries, to_minutes
from stagecast.network import build_graph

T0 = to_minutes(datetime(2009, 1, 1, tzinfo=timezone.utc))
SENSOR_CODE = {"S": 0, "U1": 1, "U2": 2, "U3": 3, "U4": 4, "X": 5}
CODE_SCALE = 10_000_000  # minutes since T0 stay far below this


def encode_stage(sensor, minute):
    return SENSOR_CODE[sensor] * CODE_SCALE + (minute - T0)


def decode_stage(value):
    code, rel = divmod(int(round(value)), CODE_SCALE)
    return code, rel + T0


def timestamp_world(days=4, gaps=()):
    """Sensor ``S`` fed by four upstream sensors whose stage values encode
    ``(sensor, instant)`` and whose rain frames hold ``1 + hour index``.

    Upstream travel times 2, 3.4, 5.5 and 7 h round to 2, 3, 6 and 7.
    ``S``'s own parcels sit 0.5, 1.2, 8 and 22 h away (buckets 1, 2, 8, 22).
    """
    sensors = [("S", 0.0), ("U1", 2.0), ("U2", 3.4), ("U3", 5.5), ("U4", 7.0), ("X", 1.0)]
    edges = [("U1", "S"), ("U2", "S"), ("U3", "S"), ("U4", "S")]
    parcels = [
        ("S", 0, 0, 0.5),
        ("S", 0, 1, 1.2),
        ("S", 0, 2, 8.0),
        ("S", 0, 3, 22.0),
        ("S", 1, 0, 3.0),
        ("U1", 1, 0, 1.0),
        ("S", 1, 1, 0.9),
    ]
    graph = build_graph(sensors, edges, parcels)
    minutes = T0 + 15 * np.arange(days * 96, dtype=np.int64)
    data = {}
    for s in SENSOR_CODE:
        keep = np.ones(len(minutes), dtype=bool)
        for gs, lo, hi in gaps:
            if gs == s:
                keep &= ~((minutes >= lo) & (minutes < hi))
        times = minutes[keep]
        data[s] = (times, np.array([float(encode_stage(s, m)) for m in times]))
    stage = StageSeries(data)
    hours = T0 + HOUR * np.arange(days * 24, dtype=np.int64)
    frames = np.broadcast_to((1.0 + np.arange(days * 24))[:, None, None], (days * 24, 2, 4)).copy()
    precip = PrecipFieldSeries((2, 4), hours, frames)
    return graph, stage, precip


@pytest.fixture
def ts_world():
    return timestamp_world()
