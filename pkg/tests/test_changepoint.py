import numpy as np
import pytest

from conftest import make_experiment
from oracles import split_scan
from traceinsight.changepoint import ChangePoint, default_penalty, detect_changepoints, vote_aggregate
from traceinsight.errors import TooShort
from traceinsight.registry import default_registry


def cps(*indices):
    return [ChangePoint(i, 1.0, 2.0) for i in indices]


class TestDetect:
    def test_single_step(self):
        (cp,) = detect_changepoints(np.r_[np.zeros(50), np.full(50, 10.0)])
        assert cp.index == 50 and cp.delta_mean == pytest.approx(10.0)
        assert cp.score > 1

    def test_constant(self):
        assert detect_changepoints(np.full(100, 3.0)) == []

    def test_two_steps(self):
        rng = np.random.default_rng(5)
        x = np.r_[np.zeros(100), np.full(100, 5.0), np.full(100, 9.0)] + rng.normal(0, 0.5, 300)
        found = [c.index for c in detect_changepoints(x)]
        assert len(found) == 2
        assert abs(found[0] - 100) <= 2 and abs(found[1] - 200) <= 2

    def test_downward_delta(self):
        (cp,) = detect_changepoints(np.r_[np.full(30, 8.0), np.full(30, 2.0)])
        assert cp.delta_mean == pytest.approx(-6.0)

    def test_max_cp(self):
        x = np.repeat([0.0, 5.0, 0.0, 5.0, 0.0], 30)
        assert len(detect_changepoints(x, max_cp=2)) == 2
        assert [c.index for c in detect_changepoints(x)] == [30, 60, 90, 120]

    def test_too_short(self):
        with pytest.raises(TooShort):
            detect_changepoints(np.arange(19.0))

    def test_gaps_rejected(self):
        with pytest.raises(ValueError):
            detect_changepoints(np.r_[np.zeros(30), np.nan])

    def test_penalty_default(self):
        x = np.arange(20.0)
        assert default_penalty(x) == pytest.approx(2 * np.var(x) * np.log(20))

    def test_boundaries_increase(self, rng):
        for _ in range(30):
            x = rng.normal(size=200).cumsum()
            idx = [c.index for c in detect_changepoints(x)]
            assert idx == sorted(set(idx)) and all(0 < i < 200 for i in idx)

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(40):
            n = int(rng.integers(20, 120))
            steps = sorted(rng.choice(np.arange(5, n - 5), size=int(rng.integers(0, 3)), replace=False))
            x = rng.normal(0, 1, n)
            for s in steps:
                x[s:] += rng.choice([-1, 1]) * rng.uniform(4, 8)
            got = [c.index for c in detect_changepoints(x)]
            assert got == split_scan(x, default_penalty(x))

    def test_noiseless_recovery(self, rng):
        tried = accepted = 0
        while accepted < 50:
            tried += 1
            n = int(rng.integers(40, 501))
            k = int(rng.integers(1, 4))
            steps = sorted(rng.choice(np.arange(5, n - 5), size=k, replace=False).tolist())
            deltas = rng.choice([-1, 1], size=k) * rng.uniform(5, 20, size=k)
            x = np.zeros(n)
            for s_, d in zip(steps, deltas):
                x[s_:] += d
            # precondition: each true split, taken between its neighbours, beats 4x the penalty
            bounds = [0, *steps, n]
            pen = default_penalty(x)
            gains = [(bounds[i] - bounds[i - 1]) * (bounds[i + 1] - bounds[i])
                     / (bounds[i + 1] - bounds[i - 1]) * deltas[i - 1] ** 2 for i in range(1, k + 1)]
            if min(gains) <= 4 * pen:
                continue
            accepted += 1
            found = [c.index for c in detect_changepoints(x)]
            assert found == steps
            if n <= 200:
                assert found == split_scan(x, pen)
        assert tried < 2000


class TestVote:
    def test_all_agree(self):
        per = {"a": cps(49), "b": cps(50), "c": cps(51), "d": cps(50)}
        (v,) = vote_aggregate(per)
        assert v.index == 50 and v.vote_fraction == 1.0 and v.contributing_metrics == ["a", "b", "c", "d"]

    def test_minority(self):
        assert vote_aggregate({"a": cps(50), "b": [], "c": [], "d": []}) == []

    def test_empty(self):
        assert vote_aggregate({}) == []

    def test_single_linkage_chains(self):
        (v,) = vote_aggregate({"a": cps(10), "b": cps(15), "c": cps(20)}, vote_window=5)
        assert v.indices == [10, 15, 20] and v.index == 15

    def test_reorder_invariant(self):
        per = {"b": cps(20, 80), "a": cps(22), "c": cps(81, 140)}
        again = dict(reversed(list(per.items())))
        assert vote_aggregate(per, min_vote_fraction=0.3) == vote_aggregate(again, min_vote_fraction=0.3)

    def test_quiet_metric_never_raises_numerator(self):
        per = {"a": cps(50), "b": cps(52)}
        before = vote_aggregate(per, min_vote_fraction=0.1)
        after = vote_aggregate({**per, "quiet": []}, min_vote_fraction=0.1)
        assert [len(v.contributing_metrics) for v in before] == [len(v.contributing_metrics) for v in after]
        assert after[0].vote_fraction < before[0].vote_fraction


def test_module_on_step_experiment(rng):
    step = np.r_[np.zeros(100), np.full(100, 10.0)]
    exp = make_experiment({"cpu": step + rng.normal(0, 1, 200), "mem": step * 0.8 + rng.normal(0, 1, 200),
                           "flat": np.full(200, 4.0)}, dt=10, t0=1000)
    report = default_registry().run("changepoint", exp)
    (v,) = report.findings["voted"]
    assert abs(v["index"] - 100) <= 2 and v["ts"] == 1000 + v["index"] * 10
    assert v["vote_fraction"] == pytest.approx(2 / 3)
    assert report.findings["per_metric"]["flat"] == []
    assert report.findings["recommendations"][0]["rule"] == "CORRELATE_WITH_DEPLOYMENTS"


def test_module_constant_only():
    report = default_registry().run("changepoint", make_experiment({"a": np.ones(50), "b": np.ones(50)}))
    assert report.findings["voted"] == [] and report.narrative_seed[0]["template"] == "changepoint.none"
