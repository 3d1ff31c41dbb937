import numpy as np
import pytest

from traceinsight.ingest import TraceEvent
from traceinsight.preprocess import Experiment, MetricSeries


def make_series(values, name="m", t0=0, dt=1, unit=""):
    return MetricSeries(name=name, unit=unit, t0=t0, dt=dt, values=np.asarray(values, dtype=float))


def make_experiment(columns, dt=1_000_000_000, t0=0, events=(), units=None, exp_id="exp"):
    units = units or {}
    series = [make_series(v, name=k, t0=t0, dt=dt, unit=units.get(k, "")) for k, v in columns.items()]
    return Experiment.create(exp_id, series, events, created_at="2024-01-01T00:00:00Z")


def ev(ts, name, stream="s", seq=0, **fields):
    return TraceEvent(ts, stream, name, fields, seq)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
