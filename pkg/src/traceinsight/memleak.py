"""Pointer-lifetime tracking and leak attribution over malloc/free events."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .base import AnalysisModule, ModuleDescriptor, ModuleResult, ParamSpec, narrative
from .errors import AllMissing, InvalidParameter, MissingField, NonNumericField, TooShort
from .ingest import TraceEvent
from .preprocess import Experiment, MetricSeries, fill_gaps
from .stats import ols_line

VERDICTS = ("leak_suspected", "no_leak", "inconclusive")
TOP_CALLSITES = 10


@dataclass
class AllocationRecord:
    ptr: str
    size: float
    alloc_ts: int
    callsite: str
    free_ts: int | None = None
    superseded: bool = False

    @property
    def freed(self) -> bool:
        return self.free_ts is not None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["freed"] = self.freed
        return d


@dataclass(frozen=True)
class AllocatorAnomaly:
    kind: str  # double_free | free_without_alloc | reuse
    ptr: str
    ts: int
    callsite: str = ""


@dataclass
class LifetimeResult:
    records: list[AllocationRecord]
    anomalies: list[AllocatorAnomaly]

    @property
    def unmatched(self) -> list[AllocationRecord]:
        return [r for r in self.records if not r.freed and not r.superseded]

    def count(self, kind: str) -> int:
        return sum(1 for a in self.anomalies if a.kind == kind)


@dataclass
class LeakReport:
    unmatched: list[AllocationRecord]
    leaked_bytes_by_callsite: dict[str, float]
    growth_slope_bytes_per_s: float | None
    growth_r2: float | None
    verdict: str
    anomalies: dict[str, list[AllocatorAnomaly]] = field(default_factory=dict)

    @property
    def unmatched_bytes(self) -> float:
        return float(sum(r.size for r in self.unmatched))

    def to_dict(self, top: int = TOP_CALLSITES) -> dict[str, Any]:
        sites = list(self.leaked_bytes_by_callsite.items())
        return {
            "verdict": self.verdict,
            "unmatched_count": len(self.unmatched),
            "unmatched_bytes": self.unmatched_bytes,
            "top_callsites": [
                {"callsite": c, "bytes": b} for c, b in sites[:top]
            ],
            "callsite_count": len(sites),
            "growth_slope_bytes_per_s": self.growth_slope_bytes_per_s,
            "growth_r2": self.growth_r2,
            "unmatched": [r.to_dict() for r in self.unmatched],
            "anomalies": {
                kind: [asdict(a) for a in items] for kind, items in sorted(self.anomalies.items())
            },
        }


def _ptr_key(value: Any) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def track_lifetimes(
    events: Iterable[TraceEvent],
    alloc_event_name: str = "malloc",
    free_event_name: str = "free",
) -> LifetimeResult:
    """Fold allocator events into allocation records.

    Events are processed in timestamp order (stable for ties).  A free closes
    the most recent open record for its pointer.  A free on a pointer that was
    never allocated is ``free_without_alloc``; a free on a pointer whose
    records are all closed is ``double_free``.  Allocating an already-open
    pointer logs ``reuse``, marks the earlier record superseded and opens a
    new one.
    """
    relevant = [e for e in events if e.name == alloc_event_name or e.name == free_event_name]
    relevant.sort(key=lambda e: e.timestamp)
    records: list[AllocationRecord] = []
    anomalies: list[AllocatorAnomaly] = []
    open_by_ptr: dict[str, list[AllocationRecord]] = defaultdict(list)
    seen: set[str] = set()
    for ev in relevant:
        f = ev.fields
        if "ptr" not in f:
            raise MissingField(f"{ev.name} event at {ev.timestamp} has no 'ptr' field")
        ptr = _ptr_key(f["ptr"])
        if ev.name == alloc_event_name:
            for key in ("size", "callsite"):
                if key not in f:
                    raise MissingField(f"{ev.name} event at {ev.timestamp} has no {key!r} field")
            size = f["size"]
            if not isinstance(size, float):
                raise NonNumericField(f"allocation size {size!r} at {ev.timestamp} is not numeric")
            stack = open_by_ptr[ptr]
            if stack:
                anomalies.append(AllocatorAnomaly("reuse", ptr, ev.timestamp, str(f["callsite"])))
                for rec in stack:
                    rec.superseded = True
            rec = AllocationRecord(ptr, size, ev.timestamp, str(f["callsite"]))
            records.append(rec)
            stack.append(rec)
            seen.add(ptr)
        else:
            stack = open_by_ptr.get(ptr)
            if stack:
                rec = stack.pop()
                rec.free_ts = ev.timestamp
                # a superseded record freed later is no longer "lost"
                rec.superseded = False
            elif ptr in seen:
                anomalies.append(AllocatorAnomaly("double_free", ptr, ev.timestamp))
            else:
                anomalies.append(AllocatorAnomaly("free_without_alloc", ptr, ev.timestamp))
    return LifetimeResult(records, anomalies)


def growth_trend(memory_series: MetricSeries) -> tuple[float, float]:
    """OLS slope (bytes per second of trace time) and r² of a memory series."""
    x = memory_series.values
    if len(x) < 10:
        raise TooShort(f"growth trend needs at least 10 samples, got {len(x)}")
    if np.isnan(x).any():
        raise ValueError("memory series has gaps; fill them first")
    t = np.arange(len(x), dtype=np.float64) * (memory_series.dt / 1e9)
    slope, _, r2 = ols_line(t, x)
    return slope, r2


def build_leak_report(
    records: Sequence[AllocationRecord] | LifetimeResult,
    anomalies: Sequence[AllocatorAnomaly] = (),
    memory_series: MetricSeries | None = None,
    min_leaked_bytes: float = 0.0,
    slope_threshold_bytes_per_s: float = 0.0,
    r2_threshold: float = 0.8,
) -> LeakReport:
    """Attribute unmatched bytes to call sites and decide a verdict.

    With a memory series, a leak is suspected only when unmatched bytes exceed
    ``min_leaked_bytes`` *and* memory grows (slope and r² above threshold);
    unmatched bytes without growth evidence are ``inconclusive``.  Without a
    series, unmatched bytes alone decide.
    """
    if isinstance(records, LifetimeResult):
        anomalies = records.anomalies
        records = records.records
    unmatched = [r for r in records if not r.freed and not r.superseded]
    by_site: dict[str, float] = defaultdict(float)
    for r in unmatched:
        by_site[r.callsite] += r.size
    ranked = dict(sorted(by_site.items(), key=lambda kv: (-kv[1], kv[0])))
    leaked = float(sum(r.size for r in unmatched))

    slope = r2 = None
    if memory_series is not None:
        try:
            slope, r2 = growth_trend(memory_series)
        except TooShort:
            slope = r2 = None
    has_unmatched = len(unmatched) > 0 and leaked > min_leaked_bytes
    if not has_unmatched:
        verdict = "no_leak"
    elif slope is None:
        verdict = "leak_suspected"
    elif slope > slope_threshold_bytes_per_s and r2 > r2_threshold:
        verdict = "leak_suspected"
    else:
        verdict = "inconclusive"

    grouped: dict[str, list[AllocatorAnomaly]] = {
        "double_free": [], "free_without_alloc": [], "reuse": []
    }
    for a in anomalies:
        grouped.setdefault(a.kind, []).append(a)
    return LeakReport(unmatched, ranked, slope, r2, verdict, grouped)


class LeakModule(AnalysisModule):
    """Memory-leak detection from allocator events and memory growth.

    Confidence: ``no_leak`` with allocator events is 0.9; ``leak_suspected``
    is 0.5 + 0.5·r² with a memory series and 0.6 without one; ``inconclusive``
    is 0.5; no allocator events at all gives 0.
    """

    descriptor = ModuleDescriptor(
        name="leak",
        version="1.0.0",
        produces="leak",
        summary="Tracks pointer lifetimes and attributes unreleased bytes to call sites.",
        parameter_schema=(
            ParamSpec("alloc_event", "string", "malloc", "Allocation event name."),
            ParamSpec("free_event", "string", "free", "Deallocation event name."),
            ParamSpec("memory_metric", "string", "",
                      "Memory-usage metric for the growth test ('' = first metric with unit 'bytes')."),
            ParamSpec("min_leaked_bytes", "float", 0.0, "Unmatched bytes needed to suspect a leak."),
            ParamSpec("slope_threshold", "float", 0.0, "Growth slope threshold in bytes/s."),
            ParamSpec("r2_threshold", "float", 0.8, "Growth fit r² threshold."),
        ),
    )

    def analyze(self, experiment: Experiment, params: dict[str, Any]) -> ModuleResult:
        lifetimes = track_lifetimes(experiment.events, params["alloc_event"], params["free_event"])
        memory = self._memory_series(experiment, params["memory_metric"])
        report = build_leak_report(
            lifetimes,
            memory_series=memory,
            min_leaked_bytes=params["min_leaked_bytes"],
            slope_threshold_bytes_per_s=params["slope_threshold"],
            r2_threshold=params["r2_threshold"],
        )
        findings = report.to_dict()
        findings["memory_metric"] = memory.name if memory is not None else None
        findings["allocations"] = len(lifetimes.records)

        story = []
        actions = []
        if report.verdict == "no_leak":
            story.append(narrative("leak.none", allocations=len(lifetimes.records)))
        else:
            top_site, top_bytes = next(iter(report.leaked_bytes_by_callsite.items()))
            story.append(narrative(
                "leak.unmatched" if report.verdict == "leak_suspected" else "leak.inconclusive",
                count=len(report.unmatched),
                bytes=report.unmatched_bytes,
                sites=len(report.leaked_bytes_by_callsite),
            ))
            story.append(narrative("leak.top_site", callsite=top_site, bytes=top_bytes))
            actions.append({
                "rule": "FIX_LEAK" if report.verdict == "leak_suspected" else "REVIEW_ALLOCATIONS",
                "values": {"callsite": top_site, "bytes": top_bytes},
            })
        if report.growth_slope_bytes_per_s is not None:
            story.append(narrative(
                "leak.growth", metric=memory.name,
                slope=report.growth_slope_bytes_per_s, r2=report.growth_r2,
            ))
        for kind in ("double_free", "free_without_alloc"):
            n = len(report.anomalies.get(kind, []))
            if n:
                story.append(narrative(f"leak.{kind}", count=n))
        findings["recommendations"] = actions

        if not lifetimes.records and not lifetimes.anomalies:
            confidence = 0.0
        elif report.verdict == "no_leak":
            confidence = 0.9
        elif report.verdict == "leak_suspected":
            confidence = 0.5 + 0.5 * report.growth_r2 if report.growth_r2 is not None else 0.6
        else:
            confidence = 0.5
        return ModuleResult(findings, confidence, story)

    @staticmethod
    def _memory_series(experiment: Experiment, name: str) -> MetricSeries | None:
        if name:
            if name not in experiment.series:
                raise InvalidParameter("memory_metric", f"unknown metric {name!r}")
            candidate = experiment.series[name]
        else:
            candidate = next((s for s in experiment.series.values() if s.unit == "bytes"), None)
        if candidate is None:
            return None
        try:
            return fill_gaps(candidate, "ffill")
        except AllMissing:
            return None
