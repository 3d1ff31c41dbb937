"""Lagged pairwise correlation across metrics and lead/lag ordering."""

from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .base import AnalysisModule, ModuleDescriptor, ModuleResult, ParamSpec, narrative, select_metrics
from .errors import ConstantSeries, TooShort
from .preprocess import Experiment, fill_gaps

METHODS = ("pearson", "spearman")
_TIE_TOL = 1e-12
# windows whose (standardized) sum of squares is below this fraction of their
# length are treated as constant
_CONST_TOL = 1e-10


@dataclass(frozen=True)
class CorrelationEdge:
    metric_a: str
    metric_b: str
    r: float
    best_lag: int
    significant: bool
    degenerate: bool = False


@dataclass(frozen=True)
class LeadLagChain:
    metrics: list[str]
    ordered: bool


@dataclass
class CorrelationReport:
    metrics: list[str]
    edges: list[CorrelationEdge]
    matrix: np.ndarray
    lead_lag_chains: list[LeadLagChain]
    max_lag: int
    r_threshold: float
    method: str = "pearson"
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "metrics": self.metrics,
            "method": self.method,
            "max_lag": self.max_lag,
            "r_threshold": self.r_threshold,
            "edge_count": len(self.edges),
            "edges": [asdict(e) for e in self.edges],
            "matrix": self.matrix.tolist(),
            "lead_lag_chains": [asdict(c) for c in self.lead_lag_chains],
        }


def lagged_correlations(X: np.ndarray, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Pearson r for every ordered column pair at lags ``0..max_lag``.

    ``R[l, i, j]`` correlates ``X[0:n-l, i]`` with ``X[l:n, j]`` (column j
    lagging column i by ``l`` samples); entries over constant windows are NaN.
    Returns ``(R, constant_columns)``.
    """
    X = np.asarray(X, dtype=np.float64)
    n, k = X.shape
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    constant = sd == 0
    Z = np.where(constant, 0.0, (X - mean) / np.where(constant, 1.0, sd))
    P1 = np.vstack([np.zeros(k), np.cumsum(Z, axis=0)])
    P2 = np.vstack([np.zeros(k), np.cumsum(Z * Z, axis=0)])
    R = np.full((max_lag + 1, k, k), np.nan)
    for lag in range(max_lag + 1):
        m = n - lag
        sa, sb = P1[m] - P1[0], P1[n] - P1[lag]
        saa, sbb = P2[m] - P2[0], P2[n] - P2[lag]
        cross = Z[:m].T @ Z[lag:]
        cov = cross - np.outer(sa, sb) / m
        va = saa - sa * sa / m
        vb = sbb - sb * sb / m
        va = np.where(va > _CONST_TOL * m, va, np.nan)
        vb = np.where(vb > _CONST_TOL * m, vb, np.nan)
        with np.errstate(invalid="ignore"):
            R[lag] = np.clip(cov / np.sqrt(np.outer(va, vb)), -1.0, 1.0)
    return R, constant


def _full_lag_stack(R: np.ndarray) -> np.ndarray:
    """Extend a ``0..L`` stack to lags ``-L..L`` (index ``lag + L``)."""
    neg = np.transpose(R[:0:-1], (0, 2, 1))
    return np.concatenate([neg, R], axis=0)


def _pick_best(stack: np.ndarray, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Best lag per pair: max |r|, ties toward smaller |lag| then negative lag."""
    lags = np.arange(-max_lag, max_lag + 1)
    pref = np.array(sorted(range(len(lags)), key=lambda i: (abs(lags[i]), lags[i])))
    ordered = stack[pref]
    mag = np.where(np.isnan(ordered), -1.0, np.abs(ordered))
    best_mag = mag.max(axis=0)
    first = np.argmax(mag >= best_mag - _TIE_TOL, axis=0)
    best_lag = lags[pref][first]
    r = np.take_along_axis(ordered, first[None], axis=0)[0]
    return best_lag, r


def _prepare(x: np.ndarray, method: str) -> np.ndarray:
    if method == "spearman":
        return rankdata(x)
    return x


def cross_correlate(a, b, max_lag: int, method: str = "pearson") -> tuple[int, float, dict[int, float]]:
    """Correlate ``a`` against lagged ``b``; positive best lag means ``b`` lags ``a``."""
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("series must share one grid")
    n = len(a)
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    if n <= 2 * max_lag + 2:
        raise TooShort(f"need more than {2 * max_lag + 2} samples for max_lag={max_lag}, got {n}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ConstantSeries("cannot correlate a constant series")
    R, _ = lagged_correlations(np.column_stack([_prepare(a, method), _prepare(b, method)]), max_lag)
    stack = _full_lag_stack(R)
    r_by_lag = {
        int(lag): float(stack[lag + max_lag, 0, 1])
        for lag in range(-max_lag, max_lag + 1)
        if not np.isnan(stack[lag + max_lag, 0, 1])
    }
    if not r_by_lag:
        raise ConstantSeries("every lag window is constant")
    best_lag, r = _pick_best(stack[:, 0:1, 1:2], max_lag)
    return int(best_lag[0, 0]), float(r[0, 0]), r_by_lag


def default_max_lag(n: int) -> int:
    return max(0, min(n // 4, 100, (n - 3) // 2))


def correlation_matrix(
    data: Experiment | Mapping[str, Sequence[float]],
    metrics: Sequence[str] | None = None,
    max_lag: int | None = None,
    r_threshold: float = 0.7,
    method: str = "pearson",
) -> CorrelationReport:
    """Evaluate every canonical metric pair (``a < b``) at its best lag."""
    if method not in METHODS:
        raise ValueError(f"unknown correlation method {method!r}")
    if isinstance(data, Experiment):
        columns = {m: data.series[m].values for m in (metrics or data.metric_names)}
    else:
        columns = {m: np.asarray(data[m], dtype=np.float64) for m in (metrics or list(data))}
    names = sorted(columns)
    if len(names) < 2:
        raise ValueError("correlation needs at least 2 metrics")
    n = len(columns[names[0]])
    if any(len(columns[m]) != n for m in names):
        raise ValueError("metrics must share one grid")
    if max_lag is None:
        max_lag = default_max_lag(n)
    if n < 3:
        max_lag = 0
    elif max_lag > (n - 3) // 2:
        raise TooShort(f"max_lag={max_lag} too large for {n} samples")
    X = np.column_stack([_prepare(columns[m], method) for m in names])
    if np.isnan(X).any():
        raise ValueError("metrics have gaps; fill them first")
    if n >= 2:
        R, constant = lagged_correlations(X, max_lag)
    else:
        R, constant = np.full((1, len(names), len(names)), np.nan), np.ones(len(names), bool)
    best_lag, best_r = _pick_best(_full_lag_stack(R), max_lag)

    matrix = np.nan_to_num(R[0], nan=0.0)
    for i in range(len(names)):
        matrix[i, i] = 0.0 if constant[i] else 1.0
    edges = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            r = best_r[i, j]
            if constant[i] or constant[j] or np.isnan(r):
                edges.append(CorrelationEdge(names[i], names[j], 0.0, 0, False, True))
                continue
            r = float(r)
            edges.append(CorrelationEdge(
                names[i], names[j], r, int(best_lag[i, j]), abs(r) >= r_threshold
            ))
    return CorrelationReport(
        metrics=names,
        edges=edges,
        matrix=matrix,
        lead_lag_chains=lead_lag_order(edges),
        max_lag=int(max_lag),
        r_threshold=float(r_threshold),
        method=method,
    )


def lead_lag_order(edges: Sequence[CorrelationEdge]) -> list[LeadLagChain]:
    """Group metrics linked by significant edges and order each group by lag.

    Edges with a non-zero best lag point from leader to lagger.  A group with
    no directed edges, or with a directed cycle, is reported unordered.
    """
    sig = [e for e in edges if e.significant and not e.degenerate]
    if not sig:
        return []
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    succ: dict[str, set[str]] = {}
    for e in sig:
        ra, rb = find(e.metric_a), find(e.metric_b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
        if e.best_lag > 0:
            succ.setdefault(e.metric_a, set()).add(e.metric_b)
        elif e.best_lag < 0:
            succ.setdefault(e.metric_b, set()).add(e.metric_a)
    groups: dict[str, list[str]] = {}
    for node in sorted(parent):
        groups.setdefault(find(node), []).append(node)

    chains = []
    for members in sorted(groups.values()):
        indeg = {m: 0 for m in members}
        has_directed = False
        for m in members:
            for s in succ.get(m, ()):
                indeg[s] += 1
                has_directed = True
        if not has_directed:
            chains.append(LeadLagChain(sorted(members), False))
            continue
        heap = [m for m in members if indeg[m] == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            m = heapq.heappop(heap)
            order.append(m)
            for s in sorted(succ.get(m, ())):
                indeg[s] -= 1
                if indeg[s] == 0:
                    heapq.heappush(heap, s)
        if len(order) == len(members):
            chains.append(LeadLagChain(order, True))
        else:
            chains.append(LeadLagChain(sorted(members), False))
    return chains


def matrix_csv(report: CorrelationReport) -> str:
    """Square CSV with metric names as header row and first column."""
    lines = ["," + ",".join(report.metrics)]
    for name, row in zip(report.metrics, report.matrix):
        lines.append(name + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


class CorrelationModule(AnalysisModule):
    """All-pairs lagged correlation.

    Confidence is the mean |r| of significant edges; with no significant edge
    it is ``1 - max|r|`` over non-degenerate edges (confidence that nothing is
    strongly related), and 0 when every edge is degenerate.
    """

    descriptor = ModuleDescriptor(
        name="correlation",
        version="1.0.0",
        produces="correlation",
        summary="Maps which metrics move together and in what order.",
        parameter_schema=(
            ParamSpec("metrics", "list", [], "Metrics to correlate (empty = all)."),
            ParamSpec("max_lag", "int", None, "Maximum lag in samples (default min(n/4, 100)).",
                      nullable=True),
            ParamSpec("r_threshold", "float", 0.7, "|r| needed for a significant edge."),
            ParamSpec("method", "enum", "pearson", "Correlation coefficient.", choices=METHODS),
            ParamSpec("gap_policy", "enum", "linear", "Gap filling before correlation.",
                      choices=("ffill", "linear", "zero")),
        ),
    )

    def analyze(self, experiment: Experiment, params: dict[str, Any]) -> ModuleResult:
        names = select_metrics(experiment, params["metrics"])
        cols = {}
        skipped = []
        for m in names:
            try:
                cols[m] = fill_gaps(experiment.series[m], params["gap_policy"]).values
            except Exception as exc:  # AllMissing
                skipped.append({"metric": m, "reason": str(exc)})
        if len(cols) < 2:
            return ModuleResult(
                {"metrics": sorted(cols), "edges": [], "edge_count": 0, "matrix": [],
                 "lead_lag_chains": [], "skipped": skipped, "recommendations": []},
                0.0,
                [narrative("correlation.too_few", metrics=len(cols))],
            )
        n = len(next(iter(cols.values())))
        max_lag = params["max_lag"]
        if max_lag is None:
            max_lag = default_max_lag(n)
        max_lag = min(max_lag, max(0, (n - 3) // 2))
        report = correlation_matrix(cols, max_lag=max_lag, r_threshold=params["r_threshold"],
                                    method=params["method"])
        findings = report.to_dict()
        findings["skipped"] = skipped
        sig = sorted((e for e in report.edges if e.significant),
                     key=lambda e: (-abs(e.r), e.metric_a, e.metric_b))
        story = [narrative("correlation.summary", pairs=len(report.edges), significant=len(sig),
                           threshold=report.r_threshold)]
        for e in sig[:5]:
            story.append(narrative("correlation.edge", a=e.metric_a, b=e.metric_b, r=e.r,
                                   lag=e.best_lag))
        actions = []
        for c in report.lead_lag_chains:
            if c.ordered:
                story.append(narrative("correlation.chain", chain=" -> ".join(c.metrics)))
                actions.append({"rule": "INVESTIGATE_LEADER",
                                "values": {"metric": c.metrics[0], "chain": " -> ".join(c.metrics)}})
            else:
                story.append(narrative("correlation.cluster", members=", ".join(c.metrics)))
        findings["recommendations"] = actions
        live = [e for e in report.edges if not e.degenerate]
        if sig:
            confidence = float(np.mean([abs(e.r) for e in sig]))
        elif live:
            confidence = 1.0 - max(abs(e.r) for e in live)
        else:
            confidence = 0.0
        return ModuleResult(findings, confidence, story)
