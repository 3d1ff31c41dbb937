"""Metric extraction, gap handling, resampling and grid alignment."""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AllMissing,
    EmptyOverlap,
    GridMismatch,
    NoMatchingEvents,
    NonNumericField,
    UpsampleNotSupported,
)
from .ingest import TraceEvent, load_trace, write_jsonl

EXTRACT_AGGREGATIONS = ("last", "sum", "count", "mean", "max")
RESAMPLE_AGGREGATIONS = ("mean", "max", "last")
GAP_POLICIES = ("ffill", "linear", "zero", "keep")

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class MetricSource:
    event_name: str = ""
    field_key: str = ""
    aggregation: str = ""

    def to_dict(self) -> dict[str, str]:
        return {
            "event_name": self.event_name,
            "field_key": self.field_key,
            "aggregation": self.aggregation,
        }


@dataclass(frozen=True, eq=False)
class MetricSeries:
    """A uniformly sampled series; sample ``i`` covers ``[t0 + i*dt, t0 + (i+1)*dt)``."""

    name: str
    unit: str
    t0: int
    dt: int
    values: np.ndarray
    source: MetricSource = field(default_factory=MetricSource)

    def __post_init__(self) -> None:
        if int(self.dt) <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "t0", int(self.t0))
        object.__setattr__(self, "dt", int(self.dt))

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def end(self) -> int:
        return self.t0 + len(self) * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self), dtype=np.int64) * self.dt

    def time_at(self, index: int) -> int:
        return self.t0 + int(index) * self.dt

    def with_values(self, values: np.ndarray, **changes: Any) -> "MetricSeries":
        return replace(self, values=values, **changes)

    def same_grid(self, other: "MetricSeries") -> bool:
        return self.t0 == other.t0 and self.dt == other.dt and len(self) == len(other)


@dataclass(frozen=True)
class MetricSpec:
    """How to derive one metric from events."""

    name: str
    event_name: str
    field_key: str
    aggregation: str
    dt: int
    unit: str = ""

    @classmethod
    def parse(cls, text: str) -> "MetricSpec":
        """Parse ``name=cpu,event=sched,field=util,agg=mean,dt=1000000[,unit=percent]``."""
        parts: dict[str, str] = {}
        for item in text.split(","):
            if not item.strip():
                continue
            if "=" not in item:
                raise ValueError(f"metric spec item {item!r} is not key=value")
            k, v = item.split("=", 1)
            parts[k.strip()] = v.strip()
        missing = {"name", "event", "agg", "dt"} - set(parts)
        if missing:
            raise ValueError(f"metric spec missing keys: {sorted(missing)}")
        return cls(
            name=parts["name"],
            event_name=parts["event"],
            field_key=parts.get("field", ""),
            aggregation=parts["agg"],
            dt=int(parts["dt"]),
            unit=parts.get("unit", ""),
        )


def extract_metric(events: Iterable[TraceEvent], spec: MetricSpec) -> MetricSeries:
    """Bucket matching events onto a regular grid and aggregate each bucket.

    ``t0`` is the earliest matching timestamp rounded down to a multiple of
    ``dt``; buckets with no events are NaN.
    """
    if spec.dt <= 0:
        raise ValueError("dt must be positive")
    if spec.aggregation not in EXTRACT_AGGREGATIONS:
        raise ValueError(f"unknown aggregation {spec.aggregation!r}")
    count_only = spec.aggregation == "count"
    ts_list: list[int] = []
    val_list: list[float] = []
    for ev in events:
        if ev.name != spec.event_name:
            continue
        if spec.field_key:
            if spec.field_key not in ev.fields:
                continue
            value = ev.fields[spec.field_key]
        elif not count_only:
            raise ValueError(f"aggregation {spec.aggregation!r} needs a field key")
        else:
            value = 1.0
        if not count_only:
            if not isinstance(value, float):
                raise NonNumericField(
                    f"field {spec.field_key!r} of event {ev.name!r} at {ev.timestamp} "
                    f"is not numeric: {value!r}"
                )
        ts_list.append(ev.timestamp)
        val_list.append(1.0 if count_only else value)
    if not ts_list:
        raise NoMatchingEvents(
            f"no {spec.event_name!r} events carrying {spec.field_key or '<any>'!r}"
        )
    ts = np.asarray(ts_list, dtype=np.int64)
    vals = np.asarray(val_list, dtype=np.float64)
    t0 = (int(ts.min()) // spec.dt) * spec.dt
    buckets = (ts - t0) // spec.dt
    n = int(buckets.max()) + 1
    counts = np.bincount(buckets, minlength=n).astype(np.float64)
    out = np.full(n, np.nan)
    filled = counts > 0
    agg = spec.aggregation
    if agg == "count":
        out[filled] = counts[filled]
    elif agg == "sum":
        out[filled] = np.bincount(buckets, weights=vals, minlength=n)[filled]
    elif agg == "mean":
        out[filled] = np.bincount(buckets, weights=vals, minlength=n)[filled] / counts[filled]
    elif agg == "max":
        np.fmax.at(out, buckets, vals)
    else:  # last: greatest timestamp wins, ties resolved by input order
        order = np.lexsort((np.arange(len(ts)), ts))
        out[buckets[order]] = vals[order]
    return MetricSeries(
        name=spec.name,
        unit=spec.unit,
        t0=t0,
        dt=spec.dt,
        values=out,
        source=MetricSource(spec.event_name, spec.field_key, spec.aggregation),
    )


def fill_gaps(series: MetricSeries, policy: str = "linear") -> MetricSeries:
    """Replace NaN samples.

    ``ffill`` carries the last value forward (leading gaps take the first
    observed value), ``linear`` interpolates between observed neighbours and
    clamps at the edges, ``zero`` writes 0, and ``keep`` returns the input.
    """
    if policy not in GAP_POLICIES:
        raise ValueError(f"unknown gap policy {policy!r}")
    if policy == "keep":
        return series
    x = series.values
    missing = np.isnan(x)
    if not missing.any():
        return series
    if missing.all():
        raise AllMissing(f"series {series.name!r} has no observed values")
    if policy == "zero":
        return series.with_values(np.where(missing, 0.0, x))
    idx = np.arange(len(x))
    observed = ~missing
    if policy == "linear":
        out = x.copy()
        out[missing] = np.interp(idx[missing], idx[observed], x[observed])
        return series.with_values(out)
    # ffill
    last = np.where(observed, idx, -1)
    np.maximum.accumulate(last, out=last)
    first = int(np.argmax(observed))
    last[last < 0] = first
    return series.with_values(x[last])


def _bucket_reduce(values: np.ndarray, factor: int, aggregation: str) -> np.ndarray:
    n = len(values)
    m = -(-n // factor)
    padded = np.full(m * factor, np.nan)
    padded[:n] = values
    blocks = padded.reshape(m, factor)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if aggregation == "mean":
            return np.nanmean(blocks, axis=1)
        if aggregation == "max":
            return np.nanmax(blocks, axis=1)
    # last observed value per bucket
    observed = ~np.isnan(blocks)
    pos = np.where(observed, np.arange(factor), -1).max(axis=1)
    out = np.full(m, np.nan)
    has = pos >= 0
    out[has] = blocks[np.flatnonzero(has), pos[has]]
    return out


def resample(series: MetricSeries, new_dt: int, aggregation: str = "mean") -> MetricSeries:
    """Downsample onto a coarser grid; NaN samples are ignored within a bucket."""
    if aggregation not in RESAMPLE_AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    new_dt = int(new_dt)
    if new_dt <= 0 or new_dt % series.dt != 0:
        raise UpsampleNotSupported(
            f"new_dt={new_dt} is not a positive multiple of dt={series.dt}"
        )
    factor = new_dt // series.dt
    if factor == 1:
        return series
    return series.with_values(_bucket_reduce(series.values, factor, aggregation), dt=new_dt)


def _common_phase(series: Sequence[MetricSeries], start: int, dt: int) -> int:
    """Smallest t >= start lying on every member grid (t ≡ t0_i mod dt_i)."""
    # Merge the congruences pairwise (generalized CRT).
    r, m = series[0].t0 % series[0].dt, series[0].dt
    for s in series[1:]:
        r2, m2 = s.t0 % s.dt, s.dt
        g = math.gcd(m, m2)
        if (r2 - r) % g:
            raise GridMismatch("series sample grids never coincide")
        lcm = m // g * m2
        # solve r + m*k ≡ r2 (mod m2)
        k = ((r2 - r) // g) * pow(m // g, -1, m2 // g) % (m2 // g) if m2 // g > 1 else 0
        r = (r + m * k) % lcm
        m = lcm
    # m == dt (lcm of member dts); first point >= start congruent to r
    return start + ((r - start) % m)


def align(series_set: Sequence[MetricSeries] | Mapping[str, MetricSeries]) -> dict[str, MetricSeries]:
    """Bring series onto one grid over their common time window.

    The grid step is the least common multiple of member steps and the window
    is the intersection of member ranges; each member is trimmed and
    mean-resampled onto it.
    """
    members = list(series_set.values()) if isinstance(series_set, Mapping) else list(series_set)
    if not members:
        raise ValueError("align needs at least one series")
    dt = members[0].dt
    for s in members[1:]:
        dt = dt // math.gcd(dt, s.dt) * s.dt
    latest_start = max(s.t0 for s in members)
    earliest_end = min(s.end for s in members)
    if earliest_end <= latest_start:
        raise EmptyOverlap("series time ranges do not overlap")
    start = _common_phase(members, latest_start, dt)
    n = (earliest_end - start) // dt
    if n <= 0:
        raise EmptyOverlap("series overlap is shorter than one common sample period")
    out: dict[str, MetricSeries] = {}
    for s in members:
        if s.name in out:
            raise ValueError(f"duplicate series name {s.name!r}")
        offset = (start - s.t0) // s.dt
        factor = dt // s.dt
        window = s.values[offset : offset + n * factor]
        if factor == 1 and offset == 0 and len(window) == len(s):
            out[s.name] = s
            continue
        values = _bucket_reduce(window, factor, "mean") if factor > 1 else window
        out[s.name] = s.with_values(values, t0=start, dt=dt)
    return out


@dataclass(frozen=True, eq=False)
class Experiment:
    """Immutable bundle of aligned metric series and the raw events behind them."""

    id: str
    series: Mapping[str, MetricSeries]
    events: tuple = ()
    created_at: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("experiment id must be non-empty")
        members = dict(self.series)
        for name, s in members.items():
            if name != s.name:
                raise ValueError(f"series keyed {name!r} is named {s.name!r}")
        grids = {(s.t0, s.dt, len(s)) for s in members.values()}
        if len(grids) > 1:
            raise GridMismatch(
                "experiment series must share t0, dt and length; "
                "run align() first (got grids " + ", ".join(map(str, sorted(grids))) + ")"
            )
        object.__setattr__(self, "series", MappingProxyType(dict(sorted(members.items()))))
        object.__setattr__(self, "events", tuple(self.events))

    @classmethod
    def create(
        cls,
        id: str,
        series: Iterable[MetricSeries] | Mapping[str, MetricSeries] = (),
        events: Iterable[TraceEvent] = (),
        created_at: str | None = None,
    ) -> "Experiment":
        members = list(series.values()) if isinstance(series, Mapping) else list(series)
        aligned = align(members) if members else {}
        if created_at is None:
            created_at = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        return cls(id=id, series=aligned, events=tuple(events), created_at=created_at)

    @property
    def metric_names(self) -> list[str]:
        return list(self.series)

    @property
    def t0(self) -> int:
        return next(iter(self.series.values())).t0 if self.series else 0

    @property
    def dt(self) -> int:
        return next(iter(self.series.values())).dt if self.series else 1

    @property
    def length(self) -> int:
        return len(next(iter(self.series.values()))) if self.series else 0

    def matrix(self, metrics: Sequence[str] | None = None) -> np.ndarray:
        names = list(metrics) if metrics is not None else self.metric_names
        if not names:
            return np.empty((self.length, 0))
        return np.column_stack([self.series[m].values for m in names])


def _format_float(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def save_experiment(exp: Experiment, directory: str | os.PathLike) -> Path:
    """Persist as ``manifest.json`` + ``series/<name>.csv`` (+ ``events.jsonl``)."""
    root = Path(directory)
    (root / "series").mkdir(parents=True, exist_ok=True)
    index = []
    for i, (name, s) in enumerate(exp.series.items()):
        fname = f"series/{i:04d}.csv"
        with open(root / fname, "w", encoding="utf-8") as fh:
            fh.write("t,value\n")
            for t, v in zip(s.times().tolist(), s.values.tolist()):
                fh.write(f"{t},{_format_float(v)}\n")
        index.append(
            {"name": name, "unit": s.unit, "file": fname, "source": s.source.to_dict()}
        )
    if exp.events:
        write_jsonl(exp.events, root / "events.jsonl")
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "id": exp.id,
        "created_at": exp.created_at,
        "grid": {"t0": exp.t0, "dt": exp.dt, "length": exp.length},
        "series": index,
        "events_file": "events.jsonl" if exp.events else None,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return root


def load_experiment(directory: str | os.PathLike) -> Experiment:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    grid = manifest["grid"]
    series = {}
    for entry in manifest["series"]:
        values = []
        with open(root / entry["file"], encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                _, v = line.rstrip("\n").split(",", 1)
                values.append(float(v) if v else math.nan)
        src = entry.get("source") or {}
        series[entry["name"]] = MetricSeries(
            name=entry["name"],
            unit=entry.get("unit", ""),
            t0=grid["t0"],
            dt=grid["dt"],
            values=np.asarray(values, dtype=np.float64),
            source=MetricSource(**src),
        )
    events: tuple = ()
    if manifest.get("events_file"):
        events = tuple(load_trace(root / manifest["events_file"], "jsonl"))
    return Experiment(
        id=manifest["id"], series=series, events=events, created_at=manifest.get("created_at", "")
    )
