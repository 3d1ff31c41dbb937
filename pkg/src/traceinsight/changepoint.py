"""Mean-shift change points by binary segmentation, plus cross-metric voting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from statistics import median_low
from typing import Any, Mapping, Sequence

import numpy as np

from .base import AnalysisModule, ModuleDescriptor, ModuleResult, ParamSpec, narrative, select_metrics
from .errors import AllMissing, TooShort
from .preprocess import GAP_POLICIES, Experiment, fill_gaps

MIN_SAMPLES = 20


@dataclass(frozen=True)
class ChangePoint:
    index: int
    delta_mean: float
    score: float


@dataclass(frozen=True)
class VotedChangePoint:
    index: int
    vote_fraction: float
    contributing_metrics: list[str]
    indices: list[int]


def default_penalty(x: np.ndarray) -> float:
    """BIC-style penalty ``2 * var(x) * log(n)``."""
    return 2.0 * float(np.var(x)) * math.log(len(x))


class _SegmentCost:
    """O(1) within-segment sum of squared deviations via prefix sums."""

    def __init__(self, x: np.ndarray) -> None:
        # centring keeps the prefix sums small
        xc = x - x.mean()
        self.s1 = np.concatenate([[0.0], np.cumsum(xc)])
        self.s2 = np.concatenate([[0.0], np.cumsum(xc * xc)])

    def cost(self, a: int, b: int) -> float:
        n = b - a
        s = self.s1[b] - self.s1[a]
        return float(self.s2[b] - self.s2[a] - s * s / n)

    def best_split(self, a: int, b: int, min_size: int) -> tuple[int, float]:
        """Split point in ``[a+min_size, b-min_size]`` with the largest cost reduction."""
        ks = np.arange(a + min_size, b - min_size + 1)
        if len(ks) == 0:
            return -1, 0.0
        s1, s2 = self.s1, self.s2
        left_n = ks - a
        right_n = b - ks
        ls = s1[ks] - s1[a]
        rs = s1[b] - s1[ks]
        tot = s1[b] - s1[a]
        # reduction = cost(a,b) - cost(a,k) - cost(k,b); the s2 terms cancel
        gain = ls * ls / left_n + rs * rs / right_n - tot * tot / (b - a)
        i = int(np.argmax(gain))
        return int(ks[i]), float(gain[i])


def detect_changepoints(
    series,
    penalty: float | None = None,
    max_cp: int = 10,
    min_size: int = 2,
) -> list[ChangePoint]:
    """Greedy binary segmentation under a squared-error cost.

    At every step the segment whose best split removes the most cost is
    split, provided the reduction exceeds ``penalty``; this repeats until no
    split qualifies or ``max_cp`` splits are made.  Indices mark the first
    sample of the new regime.
    """
    x = np.asarray(getattr(series, "values", series), dtype=np.float64)
    n = len(x)
    if n < MIN_SAMPLES:
        raise TooShort(f"change-point detection needs at least {MIN_SAMPLES} samples, got {n}")
    if np.isnan(x).any():
        raise ValueError("series has gaps; fill them first")
    if penalty is None:
        penalty = default_penalty(x)
    if np.ptp(x) == 0 or max_cp <= 0:
        return []
    if penalty <= 0:
        raise ValueError("penalty must be positive")
    cost = _SegmentCost(x)
    segments = [(0, n)]
    candidates = {(0, n): cost.best_split(0, n, min_size)}
    accepted: dict[int, float] = {}
    while len(accepted) < max_cp:
        seg = max(candidates, key=lambda s: (candidates[s][1], -s[0]))
        k, gain = candidates[seg]
        if k < 0 or gain <= penalty:
            break
        accepted[k] = gain
        del candidates[seg]
        a, b = seg
        segments.remove(seg)
        for child in ((a, k), (k, b)):
            segments.append(child)
            candidates[child] = cost.best_split(child[0], child[1], min_size)
    bounds = [0, *sorted(accepted), n]
    out = []
    for i in range(1, len(bounds) - 1):
        before = x[bounds[i - 1]:bounds[i]].mean()
        after = x[bounds[i]:bounds[i + 1]].mean()
        k = bounds[i]
        out.append(ChangePoint(k, float(after - before), accepted[k] / penalty))
    return out


def vote_aggregate(
    per_metric: Mapping[str, Sequence[ChangePoint]],
    vote_window: int = 5,
    min_vote_fraction: float = 0.5,
    total_metrics: int | None = None,
) -> list[VotedChangePoint]:
    """Cluster change points across metrics and keep widely shared ones.

    Points are chained by single linkage (neighbours at most ``vote_window``
    samples apart).  A cluster's vote fraction is its number of distinct
    metrics over all analyzed metrics.
    """
    total = total_metrics if total_metrics is not None else len(per_metric)
    points = sorted((cp.index, metric) for metric, cps in per_metric.items() for cp in cps)
    if not points or total == 0:
        return []
    clusters: list[list[tuple[int, str]]] = [[points[0]]]
    for p in points[1:]:
        if p[0] - clusters[-1][-1][0] <= vote_window:
            clusters[-1].append(p)
        else:
            clusters.append([p])
    voted = []
    for cl in clusters:
        metrics = sorted({m for _, m in cl})
        fraction = len(metrics) / total
        if fraction >= min_vote_fraction:
            idx = [i for i, _ in cl]
            voted.append(VotedChangePoint(median_low(idx), fraction, metrics, idx))
    return voted


class ChangePointModule(AnalysisModule):
    """Per-metric change points and system-level shifts by vote.

    Confidence is the mean vote fraction of emitted points; with none it is
    the fraction of analyzed metrics that show no change at all (agreement on
    stability), or 0 when nothing could be analyzed.
    """

    descriptor = ModuleDescriptor(
        name="changepoint",
        version="1.0.0",
        produces="changepoint",
        summary="Spots shifts in behaviour agreed on by several metrics.",
        parameter_schema=(
            ParamSpec("metrics", "list", [], "Metrics to scan (empty = all)."),
            ParamSpec("penalty", "float", None, "Split penalty (default 2·var·ln n per metric).",
                      nullable=True),
            ParamSpec("max_cp", "int", 10, "Maximum change points per metric."),
            ParamSpec("min_size", "int", 2, "Minimum segment length in samples."),
            ParamSpec("vote_window", "int", 5, "Linkage distance for voting, in samples."),
            ParamSpec("min_vote_fraction", "float", 0.5, "Vote share needed to report a shift."),
            ParamSpec("gap_policy", "enum", "linear", "Gap filling before detection.",
                      choices=GAP_POLICIES),
        ),
    )

    def analyze(self, experiment: Experiment, params: dict[str, Any]) -> ModuleResult:
        names = select_metrics(experiment, params["metrics"])
        per_metric: dict[str, list[ChangePoint]] = {}
        skipped = []
        for m in names:
            try:
                s = fill_gaps(experiment.series[m], params["gap_policy"])
                per_metric[m] = detect_changepoints(
                    s, params["penalty"], params["max_cp"], params["min_size"]
                )
            except (AllMissing, TooShort, ValueError) as exc:
                skipped.append({"metric": m, "reason": str(exc)})
        voted = vote_aggregate(per_metric, params["vote_window"], params["min_vote_fraction"])
        t0, dt = experiment.t0, experiment.dt
        findings = {
            "per_metric": {
                m: [dict(asdict(cp), ts=t0 + cp.index * dt) for cp in cps]
                for m, cps in per_metric.items()
            },
            "voted": [dict(asdict(v), ts=t0 + v.index * dt) for v in voted],
            "vote_window": params["vote_window"],
            "min_vote_fraction": params["min_vote_fraction"],
            "analyzed_metrics": len(per_metric),
            "skipped": skipped,
        }
        story = []
        actions = []
        for v in voted:
            story.append(narrative(
                "changepoint.voted", index=v.index, ts=t0 + v.index * dt,
                fraction=v.vote_fraction, metrics=", ".join(v.contributing_metrics),
            ))
            actions.append({"rule": "CORRELATE_WITH_DEPLOYMENTS",
                            "values": {"ts": t0 + v.index * dt,
                                       "metrics": ", ".join(v.contributing_metrics)}})
        for m, cps in per_metric.items():
            if cps:
                big = max(cps, key=lambda c: abs(c.delta_mean))
                story.append(narrative("changepoint.metric", metric=m, count=len(cps),
                                       index=big.index, delta=big.delta_mean))
        if not story:
            story.append(narrative("changepoint.none", metrics=len(per_metric)))
        findings["recommendations"] = actions
        if voted:
            confidence = float(np.mean([v.vote_fraction for v in voted]))
        elif per_metric:
            confidence = sum(1 for cps in per_metric.values() if not cps) / len(per_metric)
        else:
            confidence = 0.0
        return ModuleResult(findings, confidence, story)
