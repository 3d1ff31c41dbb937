"""Idle-stretch detection and per-core workload imbalance."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .base import AnalysisModule, ModuleDescriptor, ModuleResult, ParamSpec, narrative, select_metrics
from .errors import AllMissing, InvalidParameter
from .preprocess import Experiment, MetricSeries, fill_gaps

DEFAULT_MIN_DURATION_NS = 60 * 1_000_000_000


@dataclass(frozen=True)
class IdleInterval:
    start: int
    end: int
    mean_utilization: float
    start_index: int
    end_index: int


@dataclass
class IdleReport:
    intervals: dict[str, list[IdleInterval]] = field(default_factory=dict)
    totals: dict[str, float] = field(default_factory=dict)
    imbalance: dict[str, dict[str, Any]] = field(default_factory=dict)
    recommendations: list[dict[str, Any]] = field(default_factory=list)


def idle_intervals(series: MetricSeries, idle_threshold: float, min_duration: int) -> list[IdleInterval]:
    """Maximal half-open runs with every sample strictly below ``idle_threshold``."""
    x = series.values
    idle = x < idle_threshold
    if not idle.any():
        return []
    padded = np.concatenate([[False], idle, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    out = []
    for start, end in zip(edges[::2], edges[1::2]):
        if (end - start) * series.dt >= min_duration:
            out.append(IdleInterval(
                start=series.time_at(start),
                end=series.time_at(end),
                mean_utilization=float(x[start:end].mean()),
                start_index=int(start),
                end_index=int(end),
            ))
    return out


def idle_fraction(series: MetricSeries, intervals: Sequence[IdleInterval]) -> float:
    total = len(series) * series.dt
    if total == 0:
        return 0.0
    return sum(iv.end - iv.start for iv in intervals) / total


def core_imbalance(per_core_series: Sequence[MetricSeries | Sequence[float]]) -> tuple[float, list[float]]:
    """Coefficient of variation of per-core means (0 when the mean of means is 0)."""
    if len(per_core_series) < 2:
        raise ValueError("imbalance needs at least 2 cores")
    arrays = [np.asarray(getattr(s, "values", s), dtype=np.float64) for s in per_core_series]
    if len({len(a) for a in arrays}) > 1:
        raise ValueError("per-core series must share one grid")
    means = np.array([float(np.nanmean(a)) for a in arrays])
    mu = float(means.mean())
    if mu == 0.0:
        return 0.0, means.tolist()
    return float(means.std() / mu), means.tolist()


def recommend_idle(
    report: IdleReport, idle_fraction_threshold: float = 0.5, imbalance_threshold: float = 0.5
) -> list[dict[str, Any]]:
    recs = []
    for metric, frac in sorted(report.totals.items()):
        if frac >= idle_fraction_threshold:
            recs.append({"rule": "CONSOLIDATE", "values": {"metric": metric, "idle_fraction": frac}})
    for group, info in sorted(report.imbalance.items()):
        if info["cv"] >= imbalance_threshold:
            recs.append({"rule": "REBALANCE", "values": {"group": group, "cv": info["cv"]}})
    return recs


_CORE_NAME = re.compile(r"^(.*?)[_\-.]?(\d+)$")


def core_groups(names: Sequence[str]) -> dict[str, list[str]]:
    """Group metrics such as ``cpu0, cpu1`` (or ``cpu_0``) by their stem."""
    groups: dict[str, list[str]] = {}
    for name in names:
        m = _CORE_NAME.match(name)
        if m and m.group(1):
            groups.setdefault(m.group(1), []).append(name)
    return {g: sorted(v) for g, v in sorted(groups.items()) if len(v) >= 2}


class IdleModule(AnalysisModule):
    """Idle resources and core imbalance.

    Confidence is the mean observed (pre-fill) fraction of the analyzed
    metrics, since missing samples are counted as idle.
    """

    descriptor = ModuleDescriptor(
        name="idle",
        version="1.0.0",
        produces="idle",
        summary="Finds long idle stretches and unbalanced core workloads.",
        parameter_schema=(
            ParamSpec("metrics", "list", [], "Metrics to scan (empty = all)."),
            ParamSpec("idle_threshold", "float", 5.0, "Samples strictly below this are idle."),
            ParamSpec("min_duration", "int", DEFAULT_MIN_DURATION_NS,
                      "Minimum idle stretch in nanoseconds of trace time."),
            ParamSpec("idle_fraction_threshold", "float", 0.5, "Idle share that suggests consolidation."),
            ParamSpec("imbalance_threshold", "float", 0.5, "Core cv that suggests rebalancing."),
            ParamSpec("core_groups", "list", [],
                      "Explicit groups as 'group=m1,m2,...' (default: group by name stem, e.g. cpu0, cpu1)."),
            ParamSpec("gap_policy", "enum", "zero", "Gap filling before detection.",
                      choices=("ffill", "linear", "zero")),
        ),
    )

    def analyze(self, experiment: Experiment, params: dict[str, Any]) -> ModuleResult:
        names = select_metrics(experiment, params["metrics"])
        report = IdleReport()
        filled: dict[str, MetricSeries] = {}
        coverage = []
        skipped = []
        for m in names:
            raw = experiment.series[m]
            try:
                s = fill_gaps(raw, params["gap_policy"])
            except AllMissing as exc:
                skipped.append({"metric": m, "reason": str(exc)})
                continue
            filled[m] = s
            coverage.append(1.0 - float(np.isnan(raw.values).mean()))
            ivs = idle_intervals(s, params["idle_threshold"], params["min_duration"])
            report.intervals[m] = ivs
            report.totals[m] = idle_fraction(s, ivs)

        groups = self._groups(params["core_groups"], list(filled))
        for g, members in groups.items():
            cv, means = core_imbalance([filled[m] for m in members])
            report.imbalance[g] = {"cv": cv, "members": members, "means": means}
        report.recommendations = recommend_idle(
            report, params["idle_fraction_threshold"], params["imbalance_threshold"]
        )
        story = []
        for m, frac in report.totals.items():
            if report.intervals[m]:
                longest = max(report.intervals[m], key=lambda iv: iv.end - iv.start)
                story.append(narrative("idle.stretch", metric=m, count=len(report.intervals[m]),
                                       fraction=frac, start=longest.start, end=longest.end))
        for g, info in report.imbalance.items():
            story.append(narrative("idle.imbalance", group=g, cv=info["cv"],
                                   cores=len(info["members"])))
        if not story:
            story.append(narrative("idle.none", metrics=len(report.totals)))
        findings = {
            "intervals": {
                m: [asdict(iv) for iv in ivs] for m, ivs in report.intervals.items()
            },
            "totals": report.totals,
            "imbalance": report.imbalance,
            "idle_threshold": params["idle_threshold"],
            "min_duration": params["min_duration"],
            "skipped": skipped,
            "recommendations": report.recommendations,
        }
        return ModuleResult(findings, float(np.mean(coverage)) if coverage else 0.0, story)

    @staticmethod
    def _groups(spec: Sequence[str], available: Sequence[str]) -> dict[str, list[str]]:
        if not spec:
            return core_groups(available)
        groups = {}
        for item in spec:
            if "=" not in str(item):
                raise InvalidParameter("core_groups", f"{item!r} is not 'group=m1,m2'")
            g, members = str(item).split("=", 1)
            ms = [x.strip() for x in members.split(",") if x.strip()]
            missing = [x for x in ms if x not in available]
            if missing:
                raise InvalidParameter("core_groups", f"unknown metrics {missing}")
            if len(ms) >= 2:
                groups[g.strip()] = ms
        return groups
