import itertools

import numpy as np
import pytest

from conftest import ev, make_experiment, make_series
from traceinsight.errors import MissingField, TooShort
from traceinsight.memleak import (
    AllocationRecord,
    build_leak_report,
    growth_trend,
    track_lifetimes,
)
from traceinsight.registry import default_registry
from traceinsight.synthgen import standard_spec, synthesize


def m(ts, ptr, size, site):
    return ev(ts, "malloc", ptr=ptr, size=float(size), callsite=site)


def f(ts, ptr):
    return ev(ts, "free", ptr=ptr)


class TestTrackLifetimes:
    def test_unmatched(self):
        res = track_lifetimes([m(0, "0x1", 64, "A"), m(1, "0x2", 32, "B"), f(2, "0x1")])
        assert [(r.ptr, r.size, r.callsite) for r in res.unmatched] == [("0x2", 32.0, "B")]
        assert res.anomalies == []

    def test_orphan_free(self):
        res = track_lifetimes([f(0, "0x9")])
        assert res.records == [] and res.count("free_without_alloc") == 1

    def test_double_free(self):
        res = track_lifetimes([m(0, "0x1", 8, "A"), f(1, "0x1"), f(2, "0x1")])
        assert len(res.records) == 1 and res.records[0].freed
        assert res.count("double_free") == 1

    def test_reuse_after_free(self):
        res = track_lifetimes([m(0, "0x1", 8, "A"), f(1, "0x1"), m(2, "0x1", 16, "B")])
        assert [r.size for r in res.unmatched] == [16.0] and res.anomalies == []

    def test_reuse_while_open(self):
        res = track_lifetimes([m(0, "0x1", 8, "A"), m(1, "0x1", 16, "B")])
        assert res.count("reuse") == 1
        assert [r.callsite for r in res.unmatched] == ["B"]
        assert res.records[0].superseded

    def test_free_ts_not_before_alloc(self):
        res = track_lifetimes([f(5, "0x1"), m(3, "0x1", 1, "A")])
        assert res.records[0].free_ts == 5 and res.records[0].alloc_ts == 3

    def test_missing_fields(self):
        with pytest.raises(MissingField):
            track_lifetimes([ev(0, "malloc", size=1.0, callsite="A")])
        with pytest.raises(MissingField):
            track_lifetimes([ev(0, "malloc", ptr="0x1", size=1.0)])

    def test_custom_names(self):
        res = track_lifetimes([ev(0, "new", ptr="p", size=3.0, callsite="x")], "new", "delete")
        assert len(res.unmatched) == 1

    def test_conservation(self, rng):
        for _ in range(100):
            events = []
            for t in range(60):
                ptr = f"0x{int(rng.integers(0, 8))}"
                if rng.random() < 0.55:
                    events.append(m(t, ptr, int(rng.integers(1, 100)), "S"))
                else:
                    events.append(f(t, ptr))
            res = track_lifetimes(events)
            allocs = sum(e.name == "malloc" for e in events)
            closed = sum(r.freed for r in res.records)
            superseded = sum(r.superseded for r in res.records)
            assert allocs == closed + len(res.unmatched) + superseded

    def test_order_within_timestamp(self):
        base = [m(0, "0x1", 10, "A"), m(0, "0x2", 20, "B"), m(0, "0x3", 30, "C"), f(5, "0x2")]
        totals = set()
        for perm in itertools.permutations(base[:3]):
            res = track_lifetimes(list(perm) + base[3:])
            totals.add(sum(r.size for r in res.unmatched))
        assert totals == {40.0}


class TestGrowthTrend:
    def test_exact_line(self):
        slope, r2 = growth_trend(make_series(100.0 * np.arange(50), dt=1_000_000_000))
        assert slope == pytest.approx(100.0) and r2 == pytest.approx(1.0)

    def test_constant(self):
        assert growth_trend(make_series(np.full(20, 7.0))) == (0.0, 0.0)

    def test_noisy(self):
        y = 5 * np.arange(1000) + np.random.default_rng(0).normal(0, 1, 1000)
        slope, _ = growth_trend(make_series(y, dt=1_000_000_000))
        assert 4.9 <= slope <= 5.1

    def test_time_scale(self):
        slope, _ = growth_trend(make_series(np.arange(20.0), dt=500_000_000))
        assert slope == pytest.approx(2.0)

    def test_too_short(self):
        with pytest.raises(TooShort):
            growth_trend(make_series(np.arange(9.0)))

    def test_closed_form(self, rng):
        for _ in range(50):
            n = int(rng.integers(10, 200))
            y = rng.normal(size=n).cumsum()
            t = np.arange(n, dtype=float)
            st, sy = t.sum(), y.sum()
            expected = (n * (t * y).sum() - st * sy) / (n * (t * t).sum() - st * st)
            slope, _ = growth_trend(make_series(y, dt=1_000_000_000))
            assert slope == pytest.approx(expected, rel=1e-9, abs=1e-12)


def rec(size, site, ptr="p"):
    return AllocationRecord(ptr, float(size), 0, site)


class TestBuildReport:
    def test_aggregation(self):
        report = build_leak_report([rec(64, "A"), rec(64, "A"), rec(32, "B")])
        assert report.leaked_bytes_by_callsite == {"A": 128.0, "B": 32.0}
        assert list(report.leaked_bytes_by_callsite) == ["A", "B"]
        assert report.verdict == "leak_suspected"
        assert sum(report.leaked_bytes_by_callsite.values()) == report.unmatched_bytes

    def test_no_leak(self):
        report = build_leak_report([], memory_series=make_series(np.full(30, 5.0)))
        assert report.verdict == "no_leak"

    def test_inconclusive_without_growth(self):
        report = build_leak_report([rec(10, "A")], memory_series=make_series(np.full(30, 5.0)))
        assert report.verdict == "inconclusive"

    def test_suspected_with_growth(self):
        report = build_leak_report([rec(10, "A")], memory_series=make_series(np.arange(30.0)))
        assert report.verdict == "leak_suspected"

    def test_min_bytes(self):
        assert build_leak_report([rec(10, "A")], min_leaked_bytes=10).verdict == "no_leak"

    def test_top_ten(self):
        report = build_leak_report([rec(100 - i, f"s{i:02d}") for i in range(15)])
        d = report.to_dict()
        assert len(d["top_callsites"]) == 10 and d["callsite_count"] == 15
        assert d["top_callsites"][0] == {"callsite": "s00", "bytes": 100.0}


def test_synthgen_leak_oracle():
    for seed in range(10):
        events, truth = synthesize(standard_spec("leak", seed))
        gt = truth.of_kind("leak")[0]
        res = track_lifetimes(events)
        report = build_leak_report(res)
        assert len(report.unmatched) == gt["unmatched_count"] == 25
        assert sorted(r.ptr for r in report.unmatched) == gt["unmatched_ptrs"]
        assert report.leaked_bytes_by_callsite == gt["leaked_bytes_by_callsite"]
        assert list(report.leaked_bytes_by_callsite) == list(gt["leaked_bytes_by_callsite"])
        assert res.count("double_free") == gt["double_free"]
        assert res.count("free_without_alloc") == gt["free_without_alloc"]


def test_module_uses_bytes_metric():
    events, truth = synthesize(standard_spec("leak", 3))
    exp = make_experiment({"heap_bytes": np.arange(300.0) * 10}, events=events, units={"heap_bytes": "bytes"})
    report = default_registry().run("leak", exp)
    assert report.findings["verdict"] == "leak_suspected"
    assert report.findings["memory_metric"] == "heap_bytes"
    assert report.findings["unmatched_count"] == 25
    assert report.findings["recommendations"][0]["rule"] == "FIX_LEAK"


def test_module_without_events():
    report = default_registry().run("leak", make_experiment({"a": np.arange(30.0)}))
    assert report.findings["verdict"] == "no_leak" and report.confidence == 0.0
