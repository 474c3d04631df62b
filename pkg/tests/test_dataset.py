import io
from collections import Counter

import numpy as np
import pytest
from conftest import T0, decode_stage, timestamp_world
from hypothesis import given, settings
from hypothesis import strategies as st

from stagecast.dataset import (
    LARGER,
    MISSING_OUTPUT,
    MISSING_PRECIP,
    MISSING_STAGE,
    SMALLER,
    Dataset,
    DatasetEntry,
    Skipped,
    build_dataset,
    build_entry,
    build_height_vector,
    build_output_vector,
    build_precip_vector,
    dumps_dataset,
    get_variant,
    instants,
    loads_dataset,
    plan_sensor,
    round_hours,
    split,
)
from stagecast.errors import CorruptDataset, DegenerateSplit, EmptyRange, InsufficientUpstream
from stagecast.ingestion import HOUR, PrecipFieldSeries, StageSeries
from stagecast.network import ParcelRef, build_graph

LAGS = {"U1": 2, "U2": 3, "U3": 6, "U4": 7}


def test_variant_lengths():
    assert (SMALLER.height_len, SMALLER.input_len) == (19, 39)
    assert (LARGER.height_len, LARGER.input_len) == (120, 160)
    assert get_variant("Larger") is LARGER
    with pytest.raises(ValueError):
        get_variant("medium")


def test_round_hours_half_up():
    assert [round_hours(x) for x in (2.0, 3.4, 5.5, 6.5, 0.49)] == [2, 3, 6, 7, 0]


def test_plan_order_and_buckets(ts_world):
    graph, _, _ = ts_world
    plan = plan_sensor(graph, "S")
    assert plan.upstreams == ("U1", "U2", "U3", "U4")
    assert plan.lags == (2, 3, 6, 7)
    assert plan.buckets == {
        1: frozenset({ParcelRef(0, 0), ParcelRef(1, 1)}),
        2: frozenset({ParcelRef(0, 1)}),
        8: frozenset({ParcelRef(0, 2)}),
        22: frozenset({ParcelRef(0, 3)}),
    }
    with pytest.raises(InsufficientUpstream):
        plan_sensor(graph, "U1")


@pytest.mark.parametrize("variant", [SMALLER, LARGER])
def test_height_alignment(ts_world, variant):
    graph, stage, _ = ts_world
    t = T0 + 2 * 24 * HOUR + 45  # 15-minute instant, not on the hour
    H = build_height_vector(stage, graph, "S", t, variant)
    assert len(H) == variant.height_len
    decoded = [decode_stage(v) for v in H]
    expect = []
    for i, u in enumerate(("U1", "U2", "U3", "U4")):
        lag = LAGS[u]
        expect += [(i + 1, t - HOUR * (lag + j)) for j in range(variant.upstream_hours - 1, -1, -1)]
    expect += [(0, t - HOUR * k) for k in range(variant.self_hours, 0, -1)]
    assert decoded == expect


def test_smaller_upstream_slots_match_pattern(ts_world):
    graph, stage, _ = ts_world
    t = T0 + 30 * HOUR
    H = build_height_vector(stage, graph, "S", t, SMALLER)
    # td_1 = 2: slots are t-5, t-4, t-3, t-2
    assert [decode_stage(v)[1] for v in H[:4]] == [t - 5 * HOUR, t - 4 * HOUR, t - 3 * HOUR, t - 2 * HOUR]
    assert [decode_stage(v)[1] for v in H[16:]] == [t - 3 * HOUR, t - 2 * HOUR, t - HOUR]


def test_precip_alignment_and_crop(ts_world):
    graph, _, precip = ts_world
    plan = plan_sensor(graph, "S")
    t = T0 + 50 * HOUR + 30
    hour_index = (t - T0) // HOUR
    P = build_precip_vector(precip, plan.buckets, t, 20)
    assert len(P) == 20
    for k in range(1, 21):
        if k in plan.buckets:
            assert P[k - 1] == 1 + hour_index - k  # frame at t - k hours
        else:
            assert P[k - 1] == 0.0
    # bucket 22 only fits the longer vector
    P40 = build_precip_vector(precip, plan.buckets, t, 40)
    assert P40[21] == 1 + hour_index - 22


def test_precip_missing_frame(ts_world):
    graph, _, precip = ts_world
    plan = plan_sensor(graph, "S")
    assert build_precip_vector(precip, plan.buckets, T0 + HOUR, 20) is None


def test_zero_rain_gives_zero_vector():
    buckets = {1: frozenset({ParcelRef(0, 0)}), 5: frozenset({ParcelRef(1, 1)})}
    hours = T0 + HOUR * np.arange(48, dtype=np.int64)
    precip = PrecipFieldSeries((2, 2), hours, np.zeros((48, 2, 2)))
    assert not build_precip_vector(precip, buckets, T0 + 30 * HOUR, 20).any()


def test_output_vector(ts_world):
    _, stage, _ = ts_world
    t = T0 + 10 * HOUR + 15
    O = build_output_vector(stage, "S", t)
    assert [decode_stage(v) for v in O] == [(0, t + HOUR * k) for k in range(24)]
    const = StageSeries.from_mapping({"S": {T0 + 15 * i: 7.0 for i in range(400)}})
    np.testing.assert_array_equal(build_output_vector(const, "S", T0), np.full(24, 7.0))
    ramp = StageSeries.from_mapping({"S": {T0 + 15 * i: i / 4 for i in range(400)}})
    np.testing.assert_array_equal(build_output_vector(ramp, "S", T0), np.arange(24.0))


def test_constant_series_heights():
    graph, _, _ = timestamp_world()
    stage = StageSeries.from_mapping({s: {T0 + 15 * i: 7.0 for i in range(400)} for s in graph.sensors})
    H = build_height_vector(stage, graph, "S", T0 + 30 * HOUR, SMALLER)
    np.testing.assert_array_equal(H, np.full(19, 7.0))


def test_build_entry_shapes_and_skips():
    e = build_entry("S", T0, np.zeros(19), np.zeros(20), np.zeros(24))
    assert isinstance(e, DatasetEntry) and len(e.input) == 39
    e = build_entry("S", T0, np.zeros(120), np.zeros(40), np.zeros(24))
    assert len(e.input) == 160
    assert build_entry("S", T0, None, None, None) == Skipped("S", T0, MISSING_STAGE)
    assert build_entry("S", T0, np.zeros(19), None, None).reason == MISSING_PRECIP
    assert build_entry("S", T0, np.zeros(19), np.zeros(20), None).reason == MISSING_OUTPUT


def test_instants_grid():
    assert len(instants(T0, T0 + 24 * HOUR)) == 96
    with pytest.raises(EmptyRange):
        instants(T0, T0)


def test_build_dataset_counts_and_skips():
    gap = (T0 + 60 * HOUR, T0 + 64 * HOUR)
    graph, stage, precip = timestamp_world(days=5, gaps=[("U2", *gap)])
    t0, t1 = T0 + 30 * HOUR, T0 + 90 * HOUR
    data, report = build_dataset(graph, stage, precip, SMALLER, t0, t1)
    assert report.attempted == 60 * 4
    assert len(data) + len(report.skipped) == report.attempted
    assert data.X.shape == (len(data), 39) and data.y.shape == (len(data), 24)
    # counting oracle, one instant at a time through the single-entry API
    plan = plan_sensor(graph, "S")
    expected = Counter()
    for t in instants(t0, t1).tolist():
        e = build_entry(
            "S",
            t,
            build_height_vector(stage, graph, "S", t, SMALLER),
            build_precip_vector(precip, plan.buckets, t, 20),
            build_output_vector(stage, "S", t),
        )
        expected["ok" if isinstance(e, DatasetEntry) else e.reason] += 1
    assert expected["ok"] == len(data)
    assert {k: v for k, v in expected.items() if k != "ok"} == report.counts
    assert report.counts.get(MISSING_STAGE, 0) > 0
    rows = report.to_csv().splitlines()
    assert rows[0] == "sensor,t,reason" and len(rows) == len(report.skipped) + 1


def test_single_sensor_full_day():
    sensors = [("S", 0.0)] + [(f"U{i}", float(i)) for i in range(1, 5)]
    edges = [(f"U{i}", "S") for i in range(1, 5)]
    graph = build_graph(sensors, edges, [("S", 0, 0, 1.0)])
    stage = StageSeries.from_mapping({s: {T0 + 15 * i: 1.0 for i in range(10 * 96)} for s, _ in sensors})
    hours = T0 + HOUR * np.arange(240, dtype=np.int64)
    precip = PrecipFieldSeries((1, 1), hours, np.ones((240, 1, 1)))
    data, report = build_dataset(graph, stage, precip, SMALLER, T0 + 48 * HOUR, T0 + 72 * HOUR)
    assert len(data) == 96 and not report.skipped


def test_build_dataset_independent_of_workers():
    graph, stage, precip = timestamp_world(days=4)
    a, _ = build_dataset(graph, stage, precip, SMALLER, T0 + 24 * HOUR, T0 + 48 * HOUR, workers=1)
    b, _ = build_dataset(graph, stage, precip, SMALLER, T0 + 24 * HOUR, T0 + 48 * HOUR, workers=2)
    assert dumps_dataset(a) == dumps_dataset(b)


def _toy(n, variant=SMALLER):
    r = np.random.default_rng(n)
    return Dataset(
        variant,
        [f"S{i % 3}" for i in range(n)],
        T0 + 15 * np.arange(n),
        r.normal(size=(n, variant.input_len)),
        r.normal(size=(n, variant.output_len)),
    ).sort()


def test_split_sizes_and_determinism():
    d = _toy(10)
    tr, te = split(d, 0.8, seed=3)
    assert (len(tr), len(te)) == (8, 2)
    tr2, te2 = split(d, 0.8, seed=3)
    assert dumps_dataset(tr) == dumps_dataset(tr2) and dumps_dataset(te) == dumps_dataset(te2)
    with pytest.raises(DegenerateSplit):
        split(_toy(1), 0.8)
    with pytest.raises(ValueError):
        split(d, 1.0)


def test_chronological_split_puts_latest_in_test():
    d = _toy(20)
    tr, te = split(d, 0.75, mode="chronological")
    assert tr.times.max() < te.times.min()


@settings(max_examples=25)
@given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_preserves_multiset(n, frac, seed):
    d = _toy(n)
    try:
        tr, te = split(d, frac, seed=seed)
    except DegenerateSplit:
        assert round(frac * n) in (0, n)
        return
    key = lambda ds: sorted(zip(ds.sensors, ds.times.tolist(), map(bytes, ds.X)))  # noqa: E731
    assert sorted(key(tr) + key(te)) == key(d)
    assert len(tr) == round(frac * n)


def test_dataset_round_trip_and_corruption():
    d = _toy(7, LARGER)
    blob = dumps_dataset(d)
    assert blob.startswith(b"STAGECAST-DS v1\n")
    again = loads_dataset(blob)
    assert dumps_dataset(again) == blob
    assert again.sensors == d.sensors
    np.testing.assert_array_equal(again.X, d.X)
    with pytest.raises(CorruptDataset):
        loads_dataset(blob[:-5])
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    with pytest.raises(CorruptDataset):
        loads_dataset(bytes(flipped))
    with pytest.raises(CorruptDataset):
        loads_dataset(b"NOT A DATASET" + blob)


def test_dataset_entries_view():
    d = _toy(4)
    e = d[0]
    assert isinstance(e, DatasetEntry)
    assert Dataset.from_entries(SMALLER, d.entries).sensors == d.sensors
