import json

import numpy as np
import pytest

from traceinsight.changepoint import detect_changepoints
from traceinsight.errors import InvalidSpec
from traceinsight.ingest import load_trace
from traceinsight.preprocess import MetricSpec, extract_metric
from traceinsight.synthgen import (
    ScenarioSpec,
    generate,
    generate_load,
    load_ground_truth,
    standard_spec,
    synthesize,
)


def read_series(path, fmt, truth):
    reader = load_trace(path, fmt)
    events = list(reader)
    return {s.name: s for s in (extract_metric(events, MetricSpec.parse(x)) for x in truth.metric_specs())}, reader


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_same_seed_byte_identical(tmp_path, fmt):
    spec = standard_spec("leak", 9, metrics=["cpu"])
    a, _ = generate(spec, tmp_path / "a", fmt)
    b, _ = generate(spec, tmp_path / "b", fmt)
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_different_seed_differs(tmp_path):
    a, _ = generate(standard_spec("step", 1), tmp_path / "a")
    b, _ = generate(standard_spec("step", 2), tmp_path / "b")
    assert a[0].read_bytes() != b[0].read_bytes()


def test_step_end_to_end(tmp_path):
    spec = ScenarioSpec.from_dict({"seed": 3, "duration": 120, "metrics": ["lat"],
                                   "features": [{"kind": "step", "metric": "lat", "location": 50,
                                                 "params": {"delta": 8}}]})
    paths, truth = generate(spec, tmp_path)
    assert truth.changepoints == {"lat": [50]}
    series, reader = read_series(paths[0], "jsonl", truth)
    assert reader.quality.dropped == 0
    assert [c.index for c in detect_changepoints(series["lat"])] == [50]


def test_ground_truth_round_trip(tmp_path):
    paths, truth = generate(standard_spec("idle", 0), tmp_path)
    again = load_ground_truth(paths[1])
    assert again.to_json() == truth.to_json()
    assert json.loads(paths[2].read_text())["metrics"] == ["cpu0", "cpu1"]


def test_ground_truth_within_duration():
    for kind in ("step", "leak", "anomaly", "idle", "lag"):
        _, truth = synthesize(standard_spec(kind, 5))
        end = truth.t0 + truth.duration * truth.dt
        for f in truth.features:
            for key in ("index", "start_index", "end_index"):
                if key in f:
                    assert 0 <= f[key] <= truth.duration
            for key in ("ts", "start", "end"):
                if key in f:
                    assert truth.t0 <= f[key] <= end


def test_events_sorted_and_ingestible(tmp_path):
    paths, truth = generate(standard_spec("leak", 2, metrics=["cpu"]), tmp_path, "csv")
    events = list(load_trace(paths[0], "csv"))
    ts = [e.timestamp for e in events]
    assert ts == sorted(ts)
    assert sum(e.name == "malloc" for e in events) == 75


def test_spike_truth_matches_values():
    events, truth = synthesize(standard_spec("anomaly", 0))
    cpu = np.array([e.fields["cpu"] for e in events])
    spikes = sorted(i for f in truth.of_kind("spike") for i in f["indices"])
    assert spikes == [60, 170, 260, 333, 420]
    assert np.all(cpu[spikes] > 55)


def test_trend_feature():
    spec = ScenarioSpec.from_dict({"seed": 0, "noise_sigma": 0, "duration": 20, "metrics": ["m"],
                                   "features": [{"kind": "trend", "metric": "m", "location": 10,
                                                 "params": {"slope": 2}}]})
    events, _ = synthesize(spec)
    vals = [e.fields["m"] for e in events]
    assert vals[:10] == [50.0] * 10 and vals[10:13] == [50.0, 52.0, 54.0]


@pytest.mark.parametrize("bad", [
    {"duration": 0},
    {"bogus": 1},
    {"features": [{"kind": "wiggle", "metric": "m", "location": 0}]},
    {"features": [{"kind": "step", "metric": "m", "location": 500}]},
    {"features": [{"kind": "step", "location": 5}]},
    {"features": [{"kind": "lag_pair", "location": 0, "params": {"leader": "a", "follower": "a"}}]},
    {"features": [{"kind": "idle", "metric": "m", "location": 190, "params": {"length": 20}}]},
    {"duration": 10, "dt": 1, "features": [{"kind": "leak", "location": 0, "params": {"count": 25}}]},
    {"metrics": [], "features": []},
    {"seed": "abc"},
])
def test_invalid_spec(bad):
    with pytest.raises(InvalidSpec):
        spec = ScenarioSpec.from_dict(bad)
        synthesize(spec)


def test_invalid_json(tmp_path):
    p = tmp_path / "s.json"
    p.write_text("[1, 2]")
    with pytest.raises(InvalidSpec):
        ScenarioSpec.from_json(p)


def test_generate_load(tmp_path):
    path = generate_load(5000, tmp_path / "load.jsonl", seed=1)
    lines = path.read_text().splitlines()
    # one unit header, then one line per event
    assert lines[0] == '{"ts_unit": "ns"}' and len(lines) == 5001
    reader = load_trace(path, "jsonl")
    assert sum(1 for _ in reader) == 5000 and reader.quality.dropped == 0
    with pytest.raises(InvalidSpec):
        generate_load(0, tmp_path / "x.jsonl")
