"""Seeded synthetic traces with exact ground-truth labels.

A scenario is a set of metrics sampled on a regular grid (Gaussian noise
around a baseline) with features injected at known locations.  Metric samples
are emitted as one ``metrics`` event per time step carrying one field per
metric; allocator activity goes to a separate ``alloc`` stream.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .base import dumps_canonical
from .errors import InvalidSpec
from .ingest import TraceEvent, write_csv, write_jsonl

FEATURE_KINDS = ("spike", "step", "trend", "leak", "idle", "lag_pair")
METRICS_EVENT = "metrics"
METRICS_STREAM = "metrics"
ALLOC_STREAM = "alloc"
HEAP_METRIC = "heap_bytes"


@dataclass
class Feature:
    kind: str
    location: int = 0
    metric: str = ""
    params: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Feature":
        unknown = set(d) - {"kind", "location", "metric", "params"}
        if unknown:
            raise InvalidSpec(f"unknown feature keys {sorted(unknown)}")
        if "kind" not in d:
            raise InvalidSpec("feature needs a kind")
        return cls(str(d["kind"]), int(d.get("location", 0)), str(d.get("metric", "")),
                   dict(d.get("params", {})))


@dataclass
class ScenarioSpec:
    """Scenario description; see ``docs/formats.md`` for the JSON layout."""

    seed: int = 0
    duration: int = 200
    dt: int = 1_000_000_000
    t0: int = 0
    metrics: list[str] = field(default_factory=lambda: ["m0"])
    baseline: float = 50.0
    noise_sigma: float = 1.0
    features: list[Feature] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScenarioSpec":
        allowed = {"seed", "duration", "dt", "t0", "metrics", "baseline", "noise_sigma", "features"}
        unknown = set(d) - allowed
        if unknown:
            raise InvalidSpec(f"unknown scenario keys {sorted(unknown)}")
        try:
            spec = cls(
                seed=int(d.get("seed", 0)),
                duration=int(d.get("duration", 200)),
                dt=int(d.get("dt", 1_000_000_000)),
                t0=int(d.get("t0", 0)),
                metrics=[str(m) for m in d.get("metrics", ["m0"])],
                baseline=float(d.get("baseline", 50.0)),
                noise_sigma=float(d.get("noise_sigma", 1.0)),
                features=[Feature.from_dict(f) for f in d.get("features", [])],
            )
        except (TypeError, ValueError) as exc:
            raise InvalidSpec(str(exc)) from None
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "ScenarioSpec":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"scenario file is not JSON: {exc}") from None
        if not isinstance(data, dict):
            raise InvalidSpec("scenario must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["metrics"] = self.all_metrics()
        return d

    def all_metrics(self) -> list[str]:
        names = list(dict.fromkeys(self.metrics))
        for f in self.features:
            if f.kind == "lag_pair":
                extra = [f.params.get("leader", ""), f.params.get("follower", "")]
            elif f.kind == "leak":
                extra = [HEAP_METRIC]
            else:
                extra = [f.metric]
            for m in extra:
                if m and m not in names:
                    names.append(m)
        return names

    def validate(self) -> None:
        if self.duration < 1:
            raise InvalidSpec("duration must be at least 1 sample")
        if self.dt < 1:
            raise InvalidSpec("dt must be a positive number of nanoseconds")
        if self.t0 < 0:
            raise InvalidSpec("t0 must be non-negative")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be non-negative")
        if not self.metrics and not self.features:
            raise InvalidSpec("scenario has no metrics")
        leaks = 0
        for f in self.features:
            if f.kind not in FEATURE_KINDS:
                raise InvalidSpec(f"unknown feature kind {f.kind!r}")
            if not 0 <= f.location < self.duration:
                raise InvalidSpec(f"{f.kind} location {f.location} outside [0, {self.duration})")
            if f.kind in ("spike", "step", "trend", "idle") and not f.metric:
                raise InvalidSpec(f"{f.kind} feature needs a metric")
            if f.kind == "spike" and f.location + int(f.params.get("width", 1)) > self.duration:
                raise InvalidSpec("spike runs past the end of the scenario")
            if f.kind == "idle":
                length = int(f.params.get("length", 0))
                if length < 1 or f.location + length > self.duration:
                    raise InvalidSpec("idle window needs 1 <= length and must end within the scenario")
            if f.kind == "lag_pair":
                leader, follower = f.params.get("leader"), f.params.get("follower")
                if not leader or not follower or leader == follower:
                    raise InvalidSpec("lag_pair needs distinct leader and follower metrics")
                if abs(int(f.params.get("lag", 0))) >= self.duration // 2:
                    raise InvalidSpec("lag_pair lag must be below half the duration")
            if f.kind == "leak":
                leaks += 1
                if int(f.params.get("count", 0)) < 0:
                    raise InvalidSpec("leak count must be non-negative")
                if not f.params.get("sites", ["site_0"]):
                    raise InvalidSpec("leak needs at least one call site")
        if leaks > 1:
            raise InvalidSpec("at most one leak feature per scenario")


@dataclass
class GroundTruth:
    seed: int
    duration: int
    t0: int
    dt: int
    metrics: list[str]
    features: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return dumps_canonical(self.to_dict())

    def of_kind(self, kind: str) -> list[dict[str, Any]]:
        return [f for f in self.features if f["kind"] == kind]

    @property
    def changepoints(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for f in self.of_kind("step"):
            out.setdefault(f["metric"], []).append(f["index"])
        return {k: sorted(v) for k, v in out.items()}

    def metric_specs(self, agg: str = "last") -> list[str]:
        """Metric extraction specs that rebuild the scenario grid from the trace."""
        return [f"name={m},event={METRICS_EVENT},field={m},agg={agg},dt={self.dt}"
                + (",unit=bytes" if m == HEAP_METRIC else "") for m in self.metrics]


def _lag_signal(rng: np.random.Generator, n: int, smooth: int = 5) -> np.ndarray:
    """Smoothed white noise: strongly autocorrelated but not trending."""
    raw = rng.standard_normal(n + smooth)
    kernel = np.ones(smooth) / smooth
    sig = np.convolve(raw, kernel, mode="valid")[:n]
    return (sig - sig.mean()) / (sig.std() or 1.0)


def _leak_activity(
    spec: ScenarioSpec, f: Feature, rng: np.random.Generator
) -> tuple[list[TraceEvent], dict[str, Any], np.ndarray]:
    p = f.params
    count = int(p.get("count", 25))
    freed = int(p.get("freed", 2 * count))
    n_double = int(p.get("double_free", 0))
    n_orphan = int(p.get("free_without_alloc", 0))
    sites = [str(s) for s in p.get("sites", ["site_0", "site_1", "site_2"])]
    lo, hi = int(p.get("min_size", 16)), int(p.get("max_size", 4096))
    if n_double > freed:
        raise InvalidSpec("double_free cannot exceed the number of freed allocations")
    start = spec.t0 + f.location * spec.dt
    span = (spec.duration - f.location) * spec.dt
    if span < 4 * (count + freed + n_orphan + 1):
        raise InvalidSpec("scenario too short for the requested allocator activity")

    total = count + freed
    # distinct allocation instants, each leaving room for a later free
    slots = np.sort(rng.choice(span // 2, size=total, replace=False)) * 2
    order = rng.permutation(total)
    leaked_idx = set(order[:count].tolist())
    sizes = rng.integers(lo, hi + 1, size=total)
    site_of = rng.integers(0, len(sites), size=total)

    events: list[tuple[int, int, TraceEvent]] = []
    seq = 0
    live_changes: list[tuple[int, int]] = []
    leaked_ptrs: list[str] = []
    leaked_bytes: dict[str, int] = {}
    freed_records: list[tuple[str, int]] = []
    for k in range(total):
        ptr = f"0x{0x10000 + 16 * k:x}"
        ts = start + int(slots[k])
        size = int(sizes[k])
        site = sites[int(site_of[k])]
        events.append((ts, seq, TraceEvent(ts, ALLOC_STREAM, "malloc",
                                           {"ptr": ptr, "size": float(size), "callsite": site}, seq)))
        seq += 1
        live_changes.append((ts, size))
        if k in leaked_idx:
            leaked_ptrs.append(ptr)
            leaked_bytes[site] = leaked_bytes.get(site, 0) + size
        else:
            room = start + span - 1 - ts
            free_ts = ts + 1 + int(rng.integers(0, max(1, min(room, 20 * spec.dt))))
            events.append((free_ts, seq, TraceEvent(free_ts, ALLOC_STREAM, "free", {"ptr": ptr}, seq)))
            seq += 1
            live_changes.append((free_ts, -size))
            freed_records.append((ptr, free_ts))
    double_ptrs = []
    picks = sorted(rng.choice(len(freed_records), n_double, replace=False).tolist()) if n_double else []
    for i in picks:
        ptr, free_ts = freed_records[i]
        ts = free_ts + 1
        events.append((ts, seq, TraceEvent(ts, ALLOC_STREAM, "free", {"ptr": ptr}, seq)))
        seq += 1
        double_ptrs.append(ptr)
    orphan_ptrs = []
    for j in range(n_orphan):
        ptr = f"0x{0xdead0000 + 16 * j:x}"
        ts = start + int(rng.integers(0, span))
        events.append((ts, seq, TraceEvent(ts, ALLOC_STREAM, "free", {"ptr": ptr}, seq)))
        seq += 1
        orphan_ptrs.append(ptr)
    events.sort(key=lambda e: (e[0], e[1]))

    # live heap bytes at each sample instant (changes at or before the instant count)
    sample_ts = spec.t0 + np.arange(spec.duration, dtype=np.int64) * spec.dt
    change_ts = np.array([c[0] for c in live_changes], dtype=np.int64)
    change_sz = np.array([c[1] for c in live_changes], dtype=np.float64)
    order_c = np.argsort(change_ts, kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(change_sz[order_c])])
    heap = cum[np.searchsorted(change_ts[order_c], sample_ts, side="right")]

    truth = {
        "kind": "leak",
        "unmatched_count": count,
        "unmatched_ptrs": sorted(leaked_ptrs),
        "leaked_bytes_by_callsite": dict(sorted(leaked_bytes.items(), key=lambda kv: (-kv[1], kv[0]))),
        "leaked_bytes": int(sum(leaked_bytes.values())),
        "freed_count": freed,
        "double_free": n_double,
        "double_free_ptrs": sorted(double_ptrs),
        "free_without_alloc": n_orphan,
        "free_without_alloc_ptrs": sorted(orphan_ptrs),
        "metric": HEAP_METRIC,
    }
    return [e[2] for e in events], truth, heap


def synthesize(spec: ScenarioSpec) -> tuple[list[TraceEvent], GroundTruth]:
    """Build the scenario in memory."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    names = spec.all_metrics()
    n = spec.duration
    values = {m: spec.baseline + spec.noise_sigma * rng.standard_normal(n) for m in names}
    truth = GroundTruth(spec.seed, n, spec.t0, spec.dt, names)
    alloc_events: list[TraceEvent] = []
    idle_windows: list[tuple[str, int, int, float]] = []
    for f in spec.features:
        p = f.params
        loc = f.location
        if f.kind == "spike":
            width = int(p.get("width", 1))
            mag = float(p.get("magnitude", 10.0 * max(spec.noise_sigma, 1.0)))
            values[f.metric][loc:loc + width] += mag
            truth.features.append({"kind": "spike", "metric": f.metric,
                                   "indices": list(range(loc, loc + width)), "magnitude": mag})
        elif f.kind == "step":
            delta = float(p.get("delta", 10.0))
            values[f.metric][loc:] += delta
            truth.features.append({"kind": "step", "metric": f.metric, "index": loc, "delta": delta,
                                   "ts": spec.t0 + loc * spec.dt})
        elif f.kind == "trend":
            slope = float(p.get("slope", 0.1))
            values[f.metric][loc:] += slope * np.arange(n - loc)
            truth.features.append({"kind": "trend", "metric": f.metric, "start": loc, "slope": slope})
        elif f.kind == "idle":
            # applied last so other features cannot lift the window above its level
            idle_windows.append((f.metric, loc, loc + int(p["length"]), float(p.get("level", 0.0))))
        elif f.kind == "lag_pair":
            lag = int(p.get("lag", 5))
            amp = float(p.get("amplitude", 10.0))
            sig = _lag_signal(rng, n + abs(lag))
            leader, follower = str(p["leader"]), str(p["follower"])
            # follower[t] = leader[t - lag]
            if lag >= 0:
                lead_sig, follow_sig = sig[lag:], sig[:n]
            else:
                lead_sig, follow_sig = sig[:n], sig[-lag:]
            values[leader] += amp * lead_sig
            values[follower] += amp * follow_sig
            truth.features.append({"kind": "lag_pair", "leader": leader, "follower": follower,
                                   "lag": lag, "amplitude": amp})
        elif f.kind == "leak":
            alloc_events, leak_truth, heap = _leak_activity(spec, f, rng)
            values[HEAP_METRIC] = heap + spec.noise_sigma * rng.standard_normal(n)
            truth.features.append(leak_truth)
    for metric, a, b, level in idle_windows:
        values[metric][a:b] = level
        truth.features.append({"kind": "idle", "metric": metric, "start_index": a, "end_index": b,
                               "start": spec.t0 + a * spec.dt, "end": spec.t0 + b * spec.dt,
                               "level": level})

    metric_events = [
        TraceEvent(spec.t0 + i * spec.dt, METRICS_STREAM, METRICS_EVENT,
                   {m: float(values[m][i]) for m in names}, i)
        for i in range(n)
    ]
    events = metric_events + alloc_events
    # stable by timestamp, metric samples first at equal instants
    events.sort(key=lambda e: (e.timestamp, e.stream_id != METRICS_STREAM))
    return events, truth


def generate(
    spec: ScenarioSpec | Mapping[str, Any],
    out_dir: str | os.PathLike,
    fmt: str = "jsonl",
) -> tuple[list[Path], GroundTruth]:
    """Write ``trace.<fmt>``, ``ground_truth.json`` and ``scenario.json`` to ``out_dir``."""
    if not isinstance(spec, ScenarioSpec):
        spec = ScenarioSpec.from_dict(spec)
    if fmt not in ("jsonl", "csv"):
        raise InvalidSpec(f"unknown trace format {fmt!r}")
    events, truth = synthesize(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = out / f"trace.{fmt}"
    if fmt == "jsonl":
        write_jsonl(events, trace)
    else:
        write_csv(events, trace)
    gt = out / "ground_truth.json"
    gt.write_text(truth.to_json(), encoding="utf-8")
    sc = out / "scenario.json"
    sc.write_text(dumps_canonical(spec.to_dict()), encoding="utf-8")
    return [trace, gt, sc], truth


def generate_load(
    n_events: int,
    path: str | os.PathLike,
    rate: float = 100_000.0,
    seed: int = 0,
    streams: int = 4,
) -> Path:
    """Write an ``n_events`` JSONL benchmark trace at ``rate`` events per second."""
    if n_events < 1:
        raise InvalidSpec("n_events must be at least 1")
    rng = np.random.default_rng(seed)
    step = 1e9 / rate
    ts = (np.arange(n_events) * step).astype(np.int64)
    vals = np.round(rng.random(n_events) * 100.0, 3).tolist()
    ts = ts.tolist()
    names = ("sched_switch", "irq_entry", "syscall")
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write('{"ts_unit": "ns"}\n')
        block = 65536
        for lo in range(0, n_events, block):
            hi = min(n_events, lo + block)
            fh.write("".join(
                f'{{"ts":{ts[i]},"stream":"s{i % streams}","name":"{names[i % 3]}",'
                f'"fields":{{"cpu":{i % 8},"v":{vals[i]!r}}}}}\n'
                for i in range(lo, hi)
            ))
    return path


def load_ground_truth(path: str | os.PathLike) -> GroundTruth:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return GroundTruth(**data)


def standard_spec(kind: str, seed: int = 0, **overrides: Any) -> ScenarioSpec:
    """Ready-made scenarios used by tests and examples."""
    if kind == "step":
        d = {"seed": seed, "duration": 200, "metrics": ["cpu", "mem"],
             "features": [{"kind": "step", "metric": "cpu", "location": 100, "params": {"delta": 10}},
                          {"kind": "step", "metric": "mem", "location": 100, "params": {"delta": 8}}]}
    elif kind == "leak":
        d = {"seed": seed, "duration": 300, "metrics": [],
             "features": [{"kind": "leak", "location": 0,
                           "params": {"count": 25, "sites": ["alloc_buf", "parse_msg", "cache_put"],
                                      "double_free": 2, "free_without_alloc": 3}}]}
    elif kind == "anomaly":
        d = {"seed": seed, "duration": 500, "metrics": ["cpu"],
             "features": [{"kind": "spike", "metric": "cpu", "location": i, "params": {"magnitude": 12}}
                          for i in (60, 170, 260, 333, 420)]}
    elif kind == "idle":
        d = {"seed": seed, "duration": 600, "metrics": ["cpu0", "cpu1"],
             "features": [{"kind": "idle", "metric": "cpu0", "location": 100, "params": {"length": 120}},
                          {"kind": "idle", "metric": "cpu1", "location": 400, "params": {"length": 90}}]}
    elif kind == "lag":
        d = {"seed": seed, "duration": 400, "metrics": [],
             "features": [{"kind": "lag_pair", "location": 0,
                           "params": {"leader": "req_rate", "follower": "cpu", "lag": 7}}]}
    else:
        raise InvalidSpec(f"no standard scenario {kind!r}")
    d.update(overrides)
    return ScenarioSpec.from_dict(d)


__all__: Sequence[str] = (
    "Feature", "ScenarioSpec", "GroundTruth", "synthesize", "generate", "generate_load",
    "load_ground_truth", "standard_spec",
)
